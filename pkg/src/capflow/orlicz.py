"""Orlicz weight phi(xi, s), its s-derivative, the primitive of 1/phi, and the barrier check.

``xi`` arguments are ambient coordinate arrays of shape ``(n+1, ...)``; ``s``
broadcasts against the trailing shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import expr as ex
from .geometry import CapGrid

__all__ = [
    "OrliczFunction",
    "ConditionReport",
    "make_power",
    "make_from_expr",
    "check_barrier_condition",
    "adaptive_simpson",
]

_SAMPLE_S = np.logspace(-4, 4, 33)


def adaptive_simpson(func, a, b, rtol: float = 1e-10, max_depth: int = 40) -> np.ndarray:
    """Vectorised adaptive Simpson quadrature of ``func`` over [a, b].

    ``a`` and ``b`` are arrays of equal shape; ``func(s, idx)`` evaluates the
    integrand at points ``s`` belonging to the flat problem indices ``idx``.
    Each interval is refined until the Richardson estimate meets
    ``rtol * |whole-interval estimate|`` (plus a tiny absolute floor).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    shape = np.broadcast(a, b).shape
    a = np.broadcast_to(a, shape).ravel()
    b = np.broadcast_to(b, shape).ravel()
    idx = np.arange(a.size)
    fa, fb = func(a, idx), func(b, idx)
    m = 0.5 * (a + b)
    fm = func(m, idx)
    whole = (b - a) / 6 * (fa + 4 * fm + fb)
    total = np.zeros(a.size)
    ref = np.abs(whole)
    tol = rtol * ref + 1e-300
    for depth in range(max_depth):
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = func(lm, idx), func(rm, idx)
        left = (m - a) / 6 * (fa + 4 * flm + fm)
        right = (b - m) / 6 * (fm + 4 * frm + fb)
        delta = left + right - whole
        done = np.abs(delta) <= 15 * tol
        if depth == max_depth - 1:
            done[:] = True
        np.add.at(total, idx[done], (left + right + delta / 15)[done])
        keep = ~done
        if not keep.any():
            break
        k = keep
        a = np.concatenate([a[k], m[k]])
        b = np.concatenate([m[k], b[k]])
        m = np.concatenate([lm[k], rm[k]])
        fa, fb = np.concatenate([fa[k], fm[k]]), np.concatenate([fm[k], fb[k]])
        fm = np.concatenate([flm[k], frm[k]])
        whole = np.concatenate([left[k], right[k]])
        tol = np.concatenate([tol[k], tol[k]]) / 2
        idx = np.concatenate([idx[k], idx[k]])
    return total.reshape(shape)


@dataclass(frozen=True, eq=False)
class OrliczFunction:
    """phi(xi, s) > 0 with derivative in s and primitive Phi(xi, t) = int_0^t ds / phi."""

    kind: str  # "power" | "expr"
    p: Optional[float] = None
    expression: Optional[ex.Expr] = None
    source: str = ""
    theta: float = 0.0
    dim_n: int = 2
    names: frozenset = field(default_factory=frozenset)

    @property
    def xi_independent(self) -> bool:
        if self.kind == "power":
            return True
        return not any(name.startswith("x") for name in self.names)

    def _env(self, xi, s):
        env = {"s": s, "theta": self.theta}
        if xi is not None:
            for i in range(self.dim_n + 1):
                env[f"x{i + 1}"] = xi[i]
        return env

    def eval(self, xi, s, strict: bool = True):
        s = np.asarray(s, dtype=float)
        if self.kind == "power":
            return s ** (1.0 - self.p)
        out = ex.evaluate(self.expression, self._env(xi, s), strict=strict)
        shape = np.broadcast_shapes(s.shape, *(() if xi is None else (np.shape(c) for c in xi)))
        return np.broadcast_to(out, shape)

    def reciprocal(self, xi, s):
        """psi = 1 / phi."""
        s = np.asarray(s, dtype=float)
        if self.kind == "power":
            return s ** (self.p - 1.0)
        return 1.0 / self.eval(xi, s)

    def deriv_s(self, xi, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "power":
            return (1.0 - self.p) * s ** (-self.p)
        return self.deriv_s_numeric(xi, s)

    def deriv_s_numeric(self, xi, s):
        """Central difference with step 1e-6 max(1, s)."""
        s = np.asarray(s, dtype=float)
        step = 1e-6 * np.maximum(1.0, s)
        return (self.eval(xi, s + step) - self.eval(xi, s - step)) / (2 * step)

    def primitive(self, xi, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "power":
            if self.p <= 0:
                raise ValueError(f"Phi(xi, t) = int_0^t s^(p-1) ds diverges for p = {self.p} <= 0")
            return t**self.p / self.p
        return self.primitive_quadrature(xi, t)

    def primitive_quadrature(self, xi, t, rtol: float = 1e-10):
        """Adaptive Simpson evaluation of int_0^t ds / phi(xi, s), vectorised over nodes.

        Needs 1/phi bounded near s = 0.
        """
        t = np.asarray(t, dtype=float)
        if xi is not None:
            xi = np.asarray(xi, dtype=float)
            shape = np.broadcast(t, xi[0]).shape
            flat_xi = np.stack([np.broadcast_to(c, shape).ravel() for c in xi])
        else:
            shape = t.shape
            flat_xi = None

        if self.kind == "power" and self.p < 1:
            raise ValueError(f"1/phi = s^({self.p - 1:g}) is singular at 0; use the closed-form primitive")

        def integrand(s, idx):
            sub = None if flat_xi is None else flat_xi[:, idx]
            if self.kind == "power":
                with np.errstate(divide="ignore"):
                    return np.where(s > 0, s ** (self.p - 1.0), _limit0(self.p))
            with np.errstate(all="ignore"):
                val = 1.0 / self.eval(sub, s, strict=False)
            inner = s > 0
            if not np.all(np.isfinite(val[inner])):
                raise ValueError("1/phi is not finite inside the integration range")
            # s = 0 endpoint: take the limit, 1/phi -> 0 when phi blows up
            return np.where(inner, val, np.nan_to_num(val, nan=0.0, posinf=0.0))

        return adaptive_simpson(integrand, np.zeros(shape), np.broadcast_to(t, shape), rtol=rtol)


def _limit0(p):
    # 1/phi = s^(p-1) at s = 0
    if p > 1:
        return 0.0
    if p == 1:
        return 1.0
    return np.inf


def make_power(p: float, theta: float = 0.0, dim_n: int = 2) -> OrliczFunction:
    """phi(xi, s) = s^(1-p), the L_p weight."""
    p = float(p)
    if p == 0.0:
        raise ValueError("p = 0 is not supported: the primitive of 1/phi diverges at 0")
    return OrliczFunction(kind="power", p=p, theta=theta, dim_n=dim_n, source=f"s^({1 - p!r})")


def make_from_expr(phi_src: str, grid: Optional[CapGrid] = None, *, theta: Optional[float] = None, dim_n: Optional[int] = None) -> OrliczFunction:
    """phi from expression text in the variables x1..x{n+1}, s and theta.

    Positivity is checked on log-spaced s in [1e-4, 1e4] at every grid node
    (or without xi when no grid is given and the expression does not use it).
    """
    tree = ex.parse(phi_src)
    names = frozenset(ex.free_names(tree))
    if grid is not None:
        theta, dim_n = grid.theta, grid.dim_n
    theta = 0.0 if theta is None else float(theta)
    dim_n = 2 if dim_n is None else int(dim_n)
    allowed = {"s", "theta"} | {f"x{i + 1}" for i in range(dim_n + 1)}
    unknown = sorted(names - allowed)
    if unknown:
        raise ValueError(f"phi uses unknown variable(s) {unknown}; allowed: {sorted(allowed)}")
    phi = OrliczFunction(kind="expr", expression=tree, source=phi_src, theta=theta, dim_n=dim_n, names=names)
    if grid is not None:
        xi = grid.xi.reshape(dim_n + 1, -1)[:, :, None]
        s = _SAMPLE_S[None, :]
    elif phi.xi_independent:
        xi = None
        s = _SAMPLE_S
    else:
        raise ValueError("phi depends on xi; a grid is required to check positivity")
    vals = phi.eval(xi, s, strict=False)
    bad = np.argwhere(~(vals > 0))
    if bad.size:
        k = tuple(bad[0])
        s_w = float(np.broadcast_to(s, vals.shape)[k])
        where = "" if xi is None else f", xi={tuple(np.round(xi[:, k[0], 0], 6))}"
        raise ValueError(f"phi is not positive: phi = {vals[k]!r} at s={s_w:g}{where}")
    return phi


@dataclass
class ConditionReport:
    passes: bool
    margin_low: float
    margin_high: float
    s_lo: float
    s_hi: float
    samples: int
    low_range: tuple
    high_range: tuple

    def as_dict(self) -> dict:
        return {
            "passes": self.passes,
            "margin_low": self.margin_low,
            "margin_high": self.margin_high,
            "s_lo": self.s_lo,
            "s_hi": self.s_hi,
            "samples": self.samples,
            "low_range": list(self.low_range),
            "high_range": list(self.high_range),
        }


def barrier_product(phi: OrliczFunction, xi, s, dim_n: int):
    """phi(xi, s) s^n for xi of shape (n+1, N) and s of shape (M,) -> (N, M)."""
    s = np.asarray(s, dtype=float)
    if xi is None:
        return (phi.eval(None, s) * s**dim_n)[None, :]
    xs = xi[:, :, None]
    return np.broadcast_to(phi.eval(xs, s[None, :]) * s[None, :] ** dim_n, (xi.shape[1], s.size))


def check_barrier_condition(phi: OrliczFunction, f: np.ndarray, grid: CapGrid, s_lo: float = 1e-3, s_hi: float = 1e3, samples: int = 16) -> ConditionReport:
    """Finite-sample proxy for limsup_{s->inf} phi s^n < f < liminf_{s->0} phi s^n.

    The lower barrier is sampled on the decade [s_lo/10, s_lo] and the upper on
    [s_hi, 10 s_hi], log-spaced, at every grid node.  Margins:
    ``margin_low = min phi s^n - max f`` and ``margin_high = min f - max phi s^n``.
    """
    if not (0 < s_lo < s_hi):
        raise ValueError("need 0 < s_lo < s_hi")
    f = np.asarray(f, dtype=float)
    n = grid.dim_n
    xi = grid.xi.reshape(n + 1, -1)
    low = np.logspace(np.log10(s_lo) - 1, np.log10(s_lo), samples)
    high = np.logspace(np.log10(s_hi), np.log10(s_hi) + 1, samples)
    margin_low = float(np.min(barrier_product(phi, xi, low, n)) - np.max(f))
    margin_high = float(np.min(f) - np.max(barrier_product(phi, xi, high, n)))
    return ConditionReport(
        passes=bool(margin_low > 0 and margin_high > 0),
        margin_low=margin_low,
        margin_high=margin_high,
        s_lo=float(s_lo),
        s_hi=float(s_hi),
        samples=int(samples),
        low_range=(float(low[0]), float(low[-1])),
        high_range=(float(high[0]), float(high[-1])),
    )
