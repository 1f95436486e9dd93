"""Quantities tracked along the flow: volume, the functional J, its dissipation,
a priori bound monitors, and the cap-family ODE oracle."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .curvature import CurvatureBundle, NonConvexError, curvature_bundle
from .geometry import CapGrid, boundary_values, ell_field, fill_robin_ghosts, gradient, integrate, robin_defect
from .orlicz import OrliczFunction, barrier_product

__all__ = [
    "DiagnosticsRow",
    "MonitorRecord",
    "BarrierLevels",
    "volume",
    "functional_J",
    "dissipation",
    "volume_rate",
    "barrier_levels",
    "bound_monitors",
    "compute_row",
    "cap_ode_oracle",
    "logistic",
]


def _convex_bundle(grid, h, bundle):
    if bundle is None:
        bundle = curvature_bundle(grid, h)
    if not bundle.convex:
        raise NonConvexError("diagnostic requires a strictly convex support field")
    return bundle


def volume(grid: CapGrid, h: np.ndarray, bundle: Optional[CurvatureBundle] = None) -> float:
    """Enclosed volume, (1/(n+1)) int h det b."""
    bundle = _convex_bundle(grid, h, bundle)
    return integrate(grid, h * bundle.detb) / (grid.dim_n + 1)


def functional_J(grid, h, f, phi: OrliczFunction, bundle=None) -> float:
    """J = int f Phi(xi, h/ell) ell - V."""
    bundle = _convex_bundle(grid, h, bundle)
    ell = ell_field(grid)
    Phi = phi.primitive(grid.xi, h / ell)
    return integrate(grid, f * Phi * ell) - volume(grid, h, bundle)


def dissipation(grid, h, f, phi: OrliczFunction, bundle=None) -> float:
    """-int (h/K) (f K / phi - 1)^2, the rate of change of J along the flow."""
    bundle = _convex_bundle(grid, h, bundle)
    u = h / ell_field(grid)
    ratio = f * bundle.gauss_k / phi.eval(grid.xi, u)
    return -integrate(grid, h * bundle.detb * (ratio - 1.0) ** 2)


def volume_rate(grid, h, dh_dt, bundle=None) -> float:
    """dV/dt = int (d_t h) / K."""
    bundle = _convex_bundle(grid, h, bundle)
    return integrate(grid, dh_dt * bundle.detb)


@dataclass
class DiagnosticsRow:
    t: float
    dt: float
    J: float
    V: float
    dJdt_numeric: float
    dissipation: float
    min_h: float
    max_h: float
    min_u: float
    max_u: float
    min_K: float
    max_K: float
    min_radius: float
    max_radius: float
    grad_bound_slack: float
    residual_inf: float
    boundary_robin_defect: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> tuple:
        return astuple(self)


@dataclass
class BarrierLevels:
    """Heuristic counterparts of the constants in the lower/upper bound argument.

    ``s_minus``: largest s with inf_xi phi(xi, sig) sig^n >= max f for all sig < s
    (0 if no such s).  ``s_plus``: smallest s with sup_xi phi sig^n <= min f for
    all sig > s (inf if no such s).
    """

    s_minus: float
    s_plus: float


def barrier_levels(phi: OrliczFunction, f, grid: CapGrid, lo: float = 1e-6, hi: float = 1e6, samples: int = 241) -> BarrierLevels:
    n = grid.dim_n
    xi = grid.xi.reshape(n + 1, -1)
    fmax, fmin = float(np.max(f)), float(np.min(f))

    def low_gap(s):
        return float(np.min(barrier_product(phi, xi, np.atleast_1d(s), n)) - fmax)

    def high_gap(s):
        return float(fmin - np.max(barrier_product(phi, xi, np.atleast_1d(s), n)))

    sig = np.logspace(math.log10(lo), math.log10(hi), samples)
    g = np.array([low_gap(s) for s in sig])
    if g[0] < 0:
        s_minus = 0.0
    elif np.all(g >= 0):
        s_minus = math.inf
    else:
        k = int(np.argmax(g < 0))
        s_minus = _bisect(low_gap, sig[k - 1], sig[k])
    G = np.array([high_gap(s) for s in sig])
    if G[-1] < 0:
        s_plus = math.inf
    elif np.all(G >= 0):
        s_plus = 0.0
    else:
        k = int(np.nonzero(G < 0)[0][-1])
        s_plus = _bisect(lambda s: -high_gap(s), sig[k], sig[k + 1])
    return BarrierLevels(s_minus=s_minus, s_plus=s_plus)


def _bisect(func, a, b, iters: int = 80):
    # func(a) >= 0 > func(b); bisect in log space
    la, lb = math.log(a), math.log(b)
    for _ in range(iters):
        mid = 0.5 * (la + lb)
        if func(math.exp(mid)) >= 0:
            la = mid
        else:
            lb = mid
    return math.exp(la)


@dataclass
class MonitorRecord:
    u_lower_slack: float  # min u - (min(initial, s_minus) - tol)
    u_upper_slack: float  # (max(initial, s_plus) + tol) - max u
    grad_slack: float  # (1 + cot^2) max h^2 + tol - max(|grad h|^2 + h^2), boundary included
    min_radius: float
    curvature_band: tuple  # (eps, 1/eps) or None before it is fixed
    curvature_in_band: bool

    @property
    def ok(self) -> bool:
        return self.u_lower_slack >= 0 and self.u_upper_slack >= 0 and self.grad_slack >= 0 and self.min_radius > 0 and self.curvature_in_band


def _gradient_bound_terms(grid, h):
    """max(|grad h|^2 + h^2) and max h over the nodes and the boundary.

    The boundary enters because the bound is attained there for caps; on
    rho = theta the normal derivative is cot(theta) h by the Robin fill and
    the tangential one comes from the boundary trace.
    """
    cot = 1.0 / math.tan(grid.theta)
    G = fill_robin_ghosts(grid, h, cot)
    grad = gradient(grid, G)
    P = np.sum(grad**2, axis=0) + h**2
    hb = boundary_values(grid, G)
    Pb = (1 + cot**2) * hb**2
    if grid.dim_n == 2:
        ik = 1j * np.fft.rfftfreq(grid.n_phi, 1.0 / grid.n_phi)
        if grid.n_phi % 2 == 0:
            ik[-1] = 0.0
        dphi = np.fft.irfft(np.fft.rfft(hb) * ik, n=grid.n_phi)
        Pb = Pb + (dphi / math.sin(grid.theta)) ** 2
    return max(float(P.max()), float(Pb.max())), max(float(h.max()), float(hb.max()))


def bound_monitors(state, f, phi, initial_state, levels: Optional[BarrierLevels] = None, band: Optional[tuple] = None, tol: float = 1e-6) -> MonitorRecord:
    """Check the restated a priori bounds at an accepted state.

    Violations are reported through negative slacks, never raised.
    """
    grid = state.grid
    if levels is None:
        levels = barrier_levels(phi, f, grid)
    ell = ell_field(grid)
    u = state.h / ell
    u0 = initial_state.h / ell
    lower = min(float(u0.min()), levels.s_minus) - tol
    upper = max(float(u0.max()), levels.s_plus) + tol
    Pmax, hmax = _gradient_bound_terms(grid, state.h)
    cot = 1.0 / math.tan(grid.theta)
    grad_slack = (1 + cot**2) * hmax**2 + tol - Pmax
    bundle = state.bundle
    radii = bundle.radii
    in_band = True
    if band is not None:
        eps, inv = band
        K = bundle.gauss_k
        in_band = bool(np.all(K >= eps) and np.all(K <= inv) and np.all(radii >= eps) and np.all(radii <= inv))
    return MonitorRecord(
        u_lower_slack=float(u.min()) - lower,
        u_upper_slack=upper - float(u.max()),
        grad_slack=grad_slack,
        min_radius=float(radii[..., 0].min()),
        curvature_band=band,
        curvature_in_band=in_band,
    )


def curvature_band(bundle: CurvatureBundle, factor: float = 0.5) -> tuple:
    """Run-relative band [eps, 1/eps] fixed from one accepted state."""
    K, r = bundle.gauss_k, bundle.radii
    eps = factor * min(float(K.min()), 1.0 / float(K.max()), float(r.min()), 1.0 / float(r.max()))
    return (eps, 1.0 / eps)


def compute_row(grid, h, f, phi, bundle, *, t, dt, J, dJdt, residual_inf) -> DiagnosticsRow:
    ell = ell_field(grid)
    u = h / ell
    Pmax, hmax = _gradient_bound_terms(grid, h)
    cot = 1.0 / math.tan(grid.theta)
    return DiagnosticsRow(
        t=t,
        dt=dt,
        J=J,
        V=volume(grid, h, bundle),
        dJdt_numeric=dJdt,
        dissipation=dissipation(grid, h, f, phi, bundle),
        min_h=float(h.min()),
        max_h=float(h.max()),
        min_u=float(u.min()),
        max_u=float(u.max()),
        min_K=float(bundle.gauss_k.min()),
        max_K=float(bundle.gauss_k.max()),
        min_radius=float(bundle.radii[..., 0].min()),
        max_radius=float(bundle.radii[..., -1].max()),
        grad_bound_slack=(1 + cot**2) * hmax**2 - Pmax,
        residual_inf=residual_inf,
        boundary_robin_defect=robin_defect(grid, h, cot),
    )


def logistic(u0: float, f0: float, t: float) -> float:
    """Closed form of u' = u (1 - f0 u)."""
    et = math.exp(t)
    return u0 * et / (1.0 + f0 * u0 * (et - 1.0))


def cap_ode_oracle(u0: float, f0: float, phi: OrliczFunction, n: int, t: float) -> float:
    """Scale u(t) of the cap family h = u ell under the flow.

    Integrates u' = u (1 - f0 u^-n / phi(u)) with an embedded 4(5) Runge-Kutta
    pair at tolerance 1e-12.
    """
    if u0 <= 0 or f0 <= 0:
        raise ValueError("u0 and f0 must be positive")
    if not phi.xi_independent:
        raise ValueError("the cap oracle needs phi independent of xi")
    if t == 0:
        return float(u0)

    def rhs(_, y):
        u = y[0]
        if u <= 0:
            return [0.0]
        return [u * (1.0 - f0 * u ** (-n) * float(phi.reciprocal(None, u)))]

    def hits_zero(_, y):
        return y[0] - 1e-12 * u0

    hits_zero.terminal = True

    def blows_up(_, y):
        return 1e12 * u0 - y[0]

    blows_up.terminal = True
    sol = solve_ivp(rhs, (0.0, t), [u0], method="RK45", rtol=1e-12, atol=1e-14 * u0, events=(hits_zero, blows_up))
    if sol.status == 1:
        which = "reaches 0" if sol.t_events[0].size else "blows up"
        when = (sol.t_events[0] if sol.t_events[0].size else sol.t_events[1])[0]
        raise ArithmeticError(f"cap scale u {which} at t = {when:.6g}")
    if not sol.success:
        raise ArithmeticError(sol.message)
    return float(sol.y[0, -1])
