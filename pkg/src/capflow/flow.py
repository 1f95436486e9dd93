"""The scalar capillary Gauss curvature flow

    d_t h = -f h K / phi(xi, h/ell) + h   in C_theta,
    d_mu h = cot(theta) h                 on the boundary,

with explicit adaptive time stepping and the stationary residual
phi(xi, h/ell) det b - f as stopping criterion.

Time integration uses the second-order Runge-Kutta-Chebyshev scheme, whose
stage count grows with the stiffness of the discrete operator, under
step-doubling error control.  The boundary condition enters through the ghost
fill inside every right-hand-side evaluation.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Optional, Union

import numpy as np

from . import expr as ex
from .curvature import CurvatureBundle, NonConvexError, bundle_from_b, second_fundamental_form
from .diagnostics import (
    BarrierLevels,
    DiagnosticsRow,
    MonitorRecord,
    barrier_levels,
    bound_monitors,
    compute_row,
    curvature_band,
    dissipation,
    functional_J,
)
from .geometry import CapGrid, build_grid, ell_field, integrate, polar_filter, robin_defect
from .orlicz import ConditionReport, OrliczFunction, check_barrier_condition, make_from_expr, make_power

logger = logging.getLogger(__name__)

__all__ = [
    "FlowConfig",
    "FlowState",
    "RunReport",
    "Problem",
    "rhs",
    "stationary_residual",
    "step",
    "run",
    "rkc_coefficients",
    "rkc_stability_bound",
    "initial_state",
    "initial_support",
    "random_mode",
    "BreakdownError",
]


# --------------------------------------------------------------------------- configuration


@dataclass
class FlowConfig:
    theta: float
    dim_n: int
    n_rho: int
    n_phi: int = 1
    phi: Union[dict, OrliczFunction] = field(default_factory=lambda: {"kind": "power", "p": 3.0})
    f: str = "1"
    h0: dict = field(default_factory=lambda: {"scale": 1.0})
    t_max: float = 20.0
    tol_residual: float = 1e-6
    dt_init: float = 1e-3
    dt_min: float = 1e-10
    dt_max: float = 0.5
    safety: float = 0.9
    rtol: float = 1e-7
    atol: float = 1e-10
    monitors: bool = True
    cadence: int = 1
    sample_times: tuple = ()
    seed: int = 0
    s_lo: float = 1e-3
    s_hi: float = 1e3
    barrier_samples: int = 16
    j_tol: float = 1e-8
    max_stages: int = 600
    max_steps: int = 200_000

    def __post_init__(self):
        if not 0 < self.theta < math.pi / 2:
            raise ValueError("theta must lie in (0, pi/2)")
        if self.dim_n not in (1, 2):
            raise ValueError("dim_n must be 1 or 2")
        if not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if not (0 < self.dt_min < self.dt_init <= self.dt_max):
            raise ValueError("need 0 < dt_min < dt_init <= dt_max")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.cadence < 1:
            raise ValueError("cadence must be at least 1")

    @cached_property
    def problem(self) -> "Problem":
        return Problem.from_config(self)


def _make_phi(spec, grid: CapGrid) -> OrliczFunction:
    if isinstance(spec, OrliczFunction):
        return spec
    if spec.get("kind") == "power":
        return make_power(spec["p"], theta=grid.theta, dim_n=grid.dim_n)
    if spec.get("kind") == "expr":
        return make_from_expr(spec["src"], grid)
    raise ValueError(f"unknown phi kind {spec.get('kind')!r}")


def xi_bindings(grid: CapGrid, polar: bool = False) -> dict:
    env = {f"x{i + 1}": grid.xi[i] for i in range(grid.dim_n + 1)}
    env["theta"] = grid.theta
    if polar:
        env["rho"] = grid.rho[:, None] * np.ones(grid.shape)
        env["phi"] = np.ones(grid.shape) * grid.phi[None, :]
    return env


def eval_on_grid(grid: CapGrid, src: str, what: str, polar: bool = False) -> np.ndarray:
    tree = ex.parse(src)
    env = xi_bindings(grid, polar)
    unknown = sorted(ex.free_names(tree) - set(env))
    if unknown:
        raise ValueError(f"{what} uses unknown variable(s) {unknown}; allowed: {sorted(env)}")
    return np.broadcast_to(ex.evaluate(tree, env), grid.shape).astype(float)


def random_mode(grid: CapGrid, seed: int) -> np.ndarray:
    """Seeded smooth perturbation with zero normal derivative on the boundary.

    n = 2: combination of P_k(rho/theta) (cos k phi, sin k phi), k = 0, 1, 2, with
    P_k(r) = r^k - k/(k+2) r^(k+2) (P_0 = r^2 - r^4/2); each is smooth at the pole
    and flat at rho = theta.  n = 1: cos(pi a/theta) and sin(pi a/(2 theta)).
    Normalised to max |m| = 1.
    """
    rng = np.random.default_rng(seed)
    if grid.dim_n == 1:
        a = grid.rho[:, None] / grid.theta
        basis = [np.cos(np.pi * a), np.sin(0.5 * np.pi * a)]
    else:
        r = (grid.rho / grid.theta)[:, None]
        ph = grid.phi[None, :]
        basis = [r**2 - 0.5 * r**4 + 0 * ph]
        for k in (1, 2):
            prof = r**k - k / (k + 2) * r ** (k + 2)
            basis += [prof * np.cos(k * ph), prof * np.sin(k * ph)]
    coef = rng.uniform(-1.0, 1.0, len(basis))
    m = sum(c * b for c, b in zip(coef, basis))
    return m / np.max(np.abs(m))


# largest normal slope of the mode at the boundary, as estimated from the Robin
# defect of h0; an O(1) slope puts a kink into the ghost-filled field, while
# flat modes only show truncation-level slopes
_MODE_SLOPE_TOL = 0.2


def initial_support(grid: CapGrid, spec: dict, seed: int = 0) -> np.ndarray:
    """h0 = scale * ell * (1 + amplitude * mode).

    ``mode`` is an expression in x1..x{n+1}, theta and the polar coordinates
    rho, phi (rho is the signed arc angle for n = 1), or ``"random"`` for
    :func:`random_mode`.  Since ell already satisfies the capillary Robin
    condition, h0 does too exactly when the mode has zero normal derivative on
    the boundary; h0 is rejected when that fails, when it is not positive, or
    when it is not strictly convex.
    """
    ell = ell_field(grid)
    scale = float(spec.get("scale", 1.0))
    amp = float(spec.get("amplitude", 0.0))
    mode = spec.get("mode")
    if scale <= 0:
        raise ValueError("h0 scale must be positive")
    h = scale * ell
    if amp != 0.0 and mode is not None:
        m = random_mode(grid, seed) if mode == "random" else eval_on_grid(grid, mode, "h0 mode", polar=True)
        h = h * (1.0 + amp * m)
    if not np.all(h > 0):
        raise ValueError("initial support function is not positive")
    cot = 1.0 / math.tan(grid.theta)
    defect = robin_defect(grid, h, cot)
    if amp != 0.0 and defect > _MODE_SLOPE_TOL * abs(amp) * float(np.max(h)):
        raise ValueError(f"initial support function violates the capillary boundary condition (defect {defect:.3g}); the mode needs zero normal derivative at the boundary")
    b = second_fundamental_form(grid, h)
    if not bundle_from_b(b).convex:
        raise ValueError("initial support function is not strictly convex")
    return h


# --------------------------------------------------------------------------- problem


class Problem:
    """Grid, data and cached geometry for one flow configuration."""

    def __init__(self, grid: CapGrid, f: np.ndarray, phi: OrliczFunction):
        self.grid = grid
        self.f = np.asarray(f, dtype=float)
        if not np.all(self.f > 0):
            raise ValueError("f must be positive on the grid")
        self.phi = phi
        self.ell = ell_field(grid)
        self.xi = grid.xi
        self.n_evals = 0

    @classmethod
    def from_config(cls, cfg: FlowConfig) -> "Problem":
        grid = build_grid(cfg.theta, cfg.dim_n, cfg.n_rho, cfg.n_phi)
        phi = _make_phi(cfg.phi, grid)
        f = eval_on_grid(grid, cfg.f, "f")
        return cls(grid, f, phi)

    def bundle(self, h) -> CurvatureBundle:
        return bundle_from_b(second_fundamental_form(self.grid, h))

    def tendency(self, h, bundle: Optional[CurvatureBundle] = None, filtered: bool = True):
        """Right-hand side of the flow; NaN everywhere if h is not positive and convex."""
        self.n_evals += 1
        if not np.all(h > 0):
            return np.full_like(h, np.nan)
        if bundle is None:
            bundle = self.bundle(h)
        if not bundle.convex:
            return np.full_like(h, np.nan)
        u = h / self.ell
        psi = self.phi.reciprocal(self.xi, u)
        out = h * (1.0 - self.f * psi / bundle.detb)
        return polar_filter(self.grid, out) if filtered else out

    def residual(self, h, bundle: CurvatureBundle) -> np.ndarray:
        return self.phi.eval(self.xi, h / self.ell) * bundle.detb - self.f


def _problem_for(grid, f, phi) -> Problem:
    if isinstance(phi, dict):
        phi = _make_phi(phi, grid)
    if isinstance(f, str):
        f = eval_on_grid(grid, f, "f")
    return Problem(grid, np.broadcast_to(np.asarray(f, dtype=float), grid.shape), phi)


def rhs(grid: CapGrid, h: np.ndarray, f, phi) -> np.ndarray:
    """Nodal -f h K / phi(xi, h/ell) + h."""
    P = _problem_for(grid, f, phi)
    h = np.asarray(h, dtype=float)
    if not np.all(h > 0):
        raise NonConvexError("h must be positive")
    bundle = P.bundle(h)
    if not bundle.convex:
        raise NonConvexError("h is not strictly convex")
    return P.tendency(h, bundle, filtered=False)


def stationary_residual(grid: CapGrid, h: np.ndarray, f, phi):
    """phi(xi, h/ell) det b - f with its max norm and quadrature L2 norm."""
    P = _problem_for(grid, f, phi)
    bundle = P.bundle(np.asarray(h, dtype=float))
    if not bundle.convex:
        raise NonConvexError("h is not strictly convex")
    r = P.residual(h, bundle)
    return r, float(np.max(np.abs(r))), math.sqrt(integrate(grid, r**2))


# --------------------------------------------------------------------------- RKC


_RKC_EPS = 2.0 / 13.0


@lru_cache(maxsize=None)
def rkc_coefficients(s: int):
    """Stage coefficients (mu, nu, mu_tilde, gamma_tilde) of RKC2 with damping 2/13."""
    if s < 2:
        raise ValueError("RKC needs at least two stages")
    w0 = 1.0 + _RKC_EPS / s**2
    T = np.zeros(s + 1)
    dT = np.zeros(s + 1)
    ddT = np.zeros(s + 1)
    T[0], T[1] = 1.0, w0
    dT[1] = 1.0
    for j in range(2, s + 1):
        T[j] = 2 * w0 * T[j - 1] - T[j - 2]
        dT[j] = 2 * T[j - 1] + 2 * w0 * dT[j - 1] - dT[j - 2]
        ddT[j] = 4 * dT[j - 1] + 2 * w0 * ddT[j - 1] - ddT[j - 2]
    w1 = dT[s] / ddT[s]
    b = np.zeros(s + 1)
    b[2:] = ddT[2:] / dT[2:] ** 2
    b[0] = b[1] = b[2]
    a = 1.0 - b * T
    mu = np.zeros(s + 1)
    nu = np.zeros(s + 1)
    mut = np.zeros(s + 1)
    gt = np.zeros(s + 1)
    mut[1] = b[1] * w1
    for j in range(2, s + 1):
        mu[j] = 2 * b[j] * w0 / b[j - 1]
        nu[j] = -b[j] / b[j - 2]
        mut[j] = 2 * b[j] * w1 / b[j - 1]
        gt[j] = -a[j - 1] * mut[j]
    beta = (1.0 + w0) / w1
    return mu, nu, mut, gt, beta


def rkc_stability_bound(s: int) -> float:
    """Length of the real stability interval [-beta, 0] of RKC2 with s stages."""
    return rkc_coefficients(s)[4]


def _stages_for(z: float, max_stages: int) -> Optional[int]:
    s = max(2, int(math.ceil(math.sqrt(1.0 + 1.54 * z))) + 1)
    while s <= max_stages and rkc_stability_bound(s) < z:
        s += 1
    return s if s <= max_stages else None


def rkc_step(F, y, dt, s, F0=None):
    mu, nu, mut, gt, _ = rkc_coefficients(s)
    if F0 is None:
        F0 = F(y)
    y_prev2 = y
    y_prev = y + mut[1] * dt * F0
    for j in range(2, s + 1):
        y_new = (1 - mu[j] - nu[j]) * y + mu[j] * y_prev + nu[j] * y_prev2 + mut[j] * dt * F(y_prev) + gt[j] * dt * F0
        y_prev2, y_prev = y_prev, y_new
    return y_prev


# --------------------------------------------------------------------------- state and report


@dataclass(eq=False)
class FlowState:
    t: float
    h: np.ndarray
    bundle: CurvatureBundle
    grid: CapGrid
    dt_last: float = 0.0
    rejects: int = 0
    dt_next: float = 0.0
    J: float = math.nan
    residual_inf: float = math.nan

    def __post_init__(self):
        if not np.all(self.h > 0):
            raise ValueError("FlowState requires h > 0")
        if not self.bundle.convex:
            raise NonConvexError("FlowState requires a convex bundle")


@dataclass
class StepTrace:
    t: list = field(default_factory=list)
    dt: list = field(default_factory=list)
    J: list = field(default_factory=list)
    dissipation: list = field(default_factory=list)
    residual_inf: list = field(default_factory=list)
    stages: list = field(default_factory=list)


@dataclass
class RunReport:
    status: str
    state: FlowState
    initial_state: FlowState
    rows: list
    trace: StepTrace
    condition: ConditionReport
    levels: BarrierLevels
    monitors: list
    warnings: list
    samples: dict
    n_steps: int
    n_rejects: int
    n_evals: int
    wall_time: float
    initial_residual_inf: float
    grid: CapGrid
    snapshots: list = field(default_factory=list)

    @property
    def residual_inf(self) -> float:
        return self.state.residual_inf


class BreakdownError(RuntimeError):
    pass


# --------------------------------------------------------------------------- stepping


class Stepper:
    """Adaptive RKC2 with step doubling on one problem."""

    def __init__(self, problem: Problem, cfg: FlowConfig):
        self.P = problem
        self.cfg = cfg
        rng = np.random.default_rng(12345)
        self._v = rng.standard_normal(problem.grid.shape)
        self._rho = None
        self.last_stages = 0

    def F(self, h):
        return self.P.tendency(h)

    def spectral_radius(self, h, F0, iters: int) -> float:
        """Power iteration on finite-difference Jacobian-vector products."""
        ynorm = max(float(np.max(np.abs(h))), 1e-12)
        v = self._v
        rho = 0.0
        for _ in range(iters):
            vn = float(np.max(np.abs(v)))
            if vn == 0 or not np.isfinite(vn):
                v = np.random.default_rng(7).standard_normal(h.shape)
                vn = float(np.max(np.abs(v)))
            delta = 1e-7 * ynorm
            Jv = (self.F(h + (delta / vn) * v) - F0) / delta * vn
            if not np.all(np.isfinite(Jv)):
                delta *= 1e-3
                Jv = (self.F(h + (delta / vn) * v) - F0) / delta * vn
                if not np.all(np.isfinite(Jv)):
                    break
            jn = float(np.max(np.abs(Jv)))
            rho = jn / vn
            if jn == 0:
                break
            v = Jv / jn
        self._v = v
        self._rho = rho
        return rho

    def attempt(self, h, dt, F0, rho):
        """One full step vs two half steps; returns (candidate, error ratio) or None if unstable."""
        cfg = self.cfg
        s_full = _stages_for(1.2 * rho * dt, cfg.max_stages)
        s_half = _stages_for(1.2 * rho * dt / 2, cfg.max_stages)
        if s_full is None:
            return None
        y_full = rkc_step(self.F, h, dt, s_full, F0)
        y_mid = rkc_step(self.F, h, dt / 2, s_half, F0)
        if not np.all(np.isfinite(y_mid)) or not np.all(y_mid > 0):
            return None
        y_two = rkc_step(self.F, y_mid, dt / 2, s_half)
        if not (np.all(np.isfinite(y_full)) and np.all(np.isfinite(y_two))):
            return None
        scale = cfg.atol + cfg.rtol * np.abs(y_two)
        err = float(np.max(np.abs(y_two - y_full) / scale)) / 3.0
        self.last_stages = s_full + 2 * s_half
        return y_two, err

    def max_stable_dt(self, rho) -> float:
        return rkc_stability_bound(self.cfg.max_stages) / (1.2 * max(rho, 1e-30))


def _advance(stepper: Stepper, state: FlowState, dt_target: Optional[float] = None):
    """Take one accepted step from ``state``; returns (new state, rejects, J-warning)."""
    P, cfg = stepper.P, stepper.cfg
    h = state.h
    F0 = P.tendency(h, state.bundle)
    iters = 12 if stepper._rho is None else 4
    rho = stepper.spectral_radius(h, F0, iters)
    dt = state.dt_next or cfg.dt_init
    dt = min(dt, cfg.dt_max, stepper.max_stable_dt(rho))
    if dt_target is not None:
        dt = min(dt, dt_target)
    rejects = 0
    while True:
        if dt < cfg.dt_min:
            raise BreakdownError(f"time step underflow at t = {state.t:.6g} (dt < {cfg.dt_min:g})")
        res = stepper.attempt(h, dt, F0, rho)
        if res is not None:
            y, err = res
            if err <= cfg.safety and np.all(y > 0):
                bundle = P.bundle(y)
                if bundle.convex:
                    break
        rejects += 1
        dt *= 0.5
    grow = cfg.safety * (1.0 / max(err, 1e-10)) ** (1.0 / 3.0)
    dt_next = min(cfg.dt_max, dt * min(2.0, max(0.5, grow)))
    new = FlowState(
        t=state.t + dt,
        h=y,
        bundle=bundle,
        grid=state.grid,
        dt_last=dt,
        rejects=state.rejects + rejects,
        dt_next=dt_next,
    )
    new.J = functional_J(P.grid, y, P.f, P.phi, bundle)
    new.residual_inf = float(np.max(np.abs(P.residual(y, bundle))))
    j_warning = None
    if math.isfinite(state.J) and new.J > state.J + cfg.j_tol * (1 + abs(state.J)):
        j_warning = f"J increased by {new.J - state.J:.3e} at t = {new.t:.6g}"
        new.dt_next = dt / 2
    return new, rejects, j_warning


def initial_state(cfg: FlowConfig) -> FlowState:
    P = cfg.problem
    h0 = initial_support(P.grid, cfg.h0, cfg.seed)
    bundle = P.bundle(h0)
    st = FlowState(t=0.0, h=h0, bundle=bundle, grid=P.grid, dt_next=cfg.dt_init)
    st.J = functional_J(P.grid, h0, P.f, P.phi, bundle)
    st.residual_inf = float(np.max(np.abs(P.residual(h0, bundle))))
    return st


_STEPPERS: dict = {}


def step(state: FlowState, cfg: FlowConfig) -> FlowState:
    """Advance ``state`` by one accepted step.

    Raises :class:`BreakdownError` when the step size falls below ``dt_min``.
    """
    key = id(cfg)
    stepper = _STEPPERS.get(key)
    if stepper is None or stepper.cfg is not cfg:
        stepper = _STEPPERS[key] = Stepper(cfg.problem, cfg)
    new, _, _ = _advance(stepper, state)
    return new


# --------------------------------------------------------------------------- run loop


def run(cfg: FlowConfig, progress=None, snapshot_every: int = 0) -> RunReport:
    """Evolve until the stationary residual drops below ``tol_residual``, the
    horizon ``t_max`` is reached, or the step size underflows.

    ``progress`` receives each recorded DiagnosticsRow.  With ``snapshot_every``
    > 0 the initial state, every that-many accepted steps, and the final state
    are kept in ``RunReport.snapshots`` as (step, FlowState) pairs.
    """
    start = time.perf_counter()
    P = cfg.problem
    grid = P.grid
    condition = check_barrier_condition(P.phi, P.f, grid, cfg.s_lo, cfg.s_hi, cfg.barrier_samples)
    warnings = []
    if not condition.passes:
        msg = f"barrier condition fails (margin_low={condition.margin_low:.3g}, margin_high={condition.margin_high:.3g}); convergence is not guaranteed"
        warnings.append(msg)
        logger.warning(msg)
    levels = barrier_levels(P.phi, P.f, grid)
    st0 = initial_state(cfg)
    state = st0
    stepper = Stepper(P, cfg)
    trace = StepTrace()
    rows: list[DiagnosticsRow] = []
    monitors: list[MonitorRecord] = []
    samples: dict = {}
    pending = sorted(float(t) for t in cfg.sample_times if 0 < t <= cfg.t_max)
    for t in cfg.sample_times:
        if t == 0:
            samples[0.0] = st0.h.copy()
    snapshots = [(0, st0)] if snapshot_every > 0 else []
    band = None
    n_steps = 0
    n_rejects = 0
    status = "horizon"

    if state.residual_inf <= cfg.tol_residual:
        status = "converged"
    else:
        while n_steps < cfg.max_steps:
            target = cfg.t_max - state.t
            if pending:
                target = min(target, pending[0] - state.t)
            try:
                new, rej, jw = _advance(stepper, state, dt_target=target)
            except BreakdownError as exc:
                warnings.append(str(exc))
                status = "breakdown"
                break
            n_steps += 1
            n_rejects += rej
            if jw:
                warnings.append(jw)
            diss = dissipation(grid, new.h, P.f, P.phi, new.bundle)
            trace.t.append(new.t)
            trace.dt.append(new.dt_last)
            trace.J.append(new.J)
            trace.dissipation.append(diss)
            trace.residual_inf.append(new.residual_inf)
            trace.stages.append(stepper.last_stages)
            prev, state = state, new
            if pending and abs(state.t - pending[0]) <= 1e-12 * max(1.0, pending[0]):
                state.t = pending[0]
                samples[pending.pop(0)] = state.h.copy()
            if band is None and cfg.monitors:
                band = curvature_band(state.bundle)
            converged = state.residual_inf <= cfg.tol_residual
            at_horizon = state.t >= cfg.t_max * (1 - 1e-14)
            if n_steps % cfg.cadence == 0 or converged or at_horizon:
                dJdt = (state.J - prev.J) / state.dt_last
                rows.append(
                    compute_row(grid, state.h, P.f, P.phi, state.bundle, t=state.t, dt=state.dt_last, J=state.J, dJdt=dJdt, residual_inf=state.residual_inf)
                )
                if cfg.monitors:
                    monitors.append(bound_monitors(state, P.f, P.phi, st0, levels, band))
                if progress is not None:
                    progress(rows[-1])
            if snapshot_every > 0 and n_steps % snapshot_every == 0:
                snapshots.append((n_steps, state))
            if converged:
                status = "converged"
                break
            if at_horizon:
                status = "horizon"
                break
        if status == "horizon" and _plateaued(trace, cfg.j_tol):
            status = "oscillating"

    if snapshot_every > 0 and snapshots[-1][1] is not state:
        snapshots.append((n_steps, state))
    return RunReport(
        status=status,
        state=state,
        initial_state=st0,
        rows=rows,
        trace=trace,
        condition=condition,
        levels=levels,
        monitors=monitors,
        warnings=warnings,
        samples=samples,
        n_steps=n_steps,
        n_rejects=n_rejects,
        n_evals=P.n_evals,
        wall_time=time.perf_counter() - start,
        initial_residual_inf=st0.residual_inf,
        grid=grid,
        snapshots=snapshots,
    )


def _plateaued(trace: StepTrace, j_tol: float) -> bool:
    """Residual neither decays nor grows over the second half of the run while J keeps decreasing."""
    if len(trace.t) < 8:
        return False
    t = np.asarray(trace.t)
    half = int(np.searchsorted(t, 0.5 * t[-1]))
    r = np.asarray(trace.residual_inf)
    J = np.asarray(trace.J)
    stalled = 0.5 * r[half] < r[-1] < 1.5 * r[half]
    decreasing = J[-1] < J[half] - j_tol * (1 + abs(J[half]))
    return bool(stalled and decreasing)
