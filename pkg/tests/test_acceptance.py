"""Acceptance criteria 1 to 9.

Each test prints one ``CRITERION k: PASS|FAIL`` line with the measured numbers
and then asserts the same condition, so the summary is visible with or
without ``-s``.  Criterion 3 is run exactly as stated; its supplementary p = 4
variant is reported on a separate ``SUPPLEMENT 3b`` line.
"""

import json
import math
import time

import numpy as np
import pytest

from capflow.cli import run_command
from capflow.curvature import curvature_bundle, embed, polyhedral_volume
from capflow.diagnostics import logistic, volume
from capflow.flow import FlowConfig, run, stationary_residual
from capflow.geometry import (
    build_grid,
    covariant_derivative,
    covariant_hessian,
    ell_field,
    fill_robin_ghosts,
    gradient,
    integrate,
    resample,
    robin_defect,
)
from capflow.orlicz import check_barrier_condition, make_power

from conftest import exact_ghosted

PI3 = math.pi / 3
PI4 = math.pi / 4


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n{label}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail

    return emit


def timed_run(cfg, **kw):
    t0 = time.perf_counter()
    rep = run(cfg, **kw)
    return rep, time.perf_counter() - t0


def stationary_cfg(n_rho=64, n_phi=128, **kw):
    base = dict(theta=PI3, dim_n=2, n_rho=n_rho, n_phi=n_phi, phi={"kind": "power", "p": 3}, f="1", h0={"scale": 1.0}, t_max=1.0, tol_residual=1e-12)
    base.update(kw)
    return FlowConfig(**base)


def logistic_cfg(**kw):
    base = dict(theta=PI4, dim_n=1, n_rho=400, phi={"kind": "power", "p": 3}, f="1", h0={"scale": 0.5}, t_max=20.0, tol_residual=1e-6, sample_times=(2.0,))
    base.update(kw)
    return FlowConfig(**base)


def variable_cfg(p, tol=1e-3):
    return FlowConfig(theta=PI3, dim_n=2, n_rho=64, n_phi=128, phi={"kind": "power", "p": p}, f="1+0.3*x3", h0={"scale": 1.0}, t_max=20.0, tol_residual=tol)


@pytest.fixture(scope="module")
def run1():
    return timed_run(stationary_cfg())


@pytest.fixture(scope="module")
def run2():
    return timed_run(logistic_cfg())


@pytest.fixture(scope="module")
def run3():
    return timed_run(variable_cfg(3))


@pytest.fixture(scope="module")
def run3b():
    # stopping at 1e-3 leaves transient residual that no re-evaluation removes;
    # the fine-grid check needs the discrete steady state, reached at 1e-5
    return timed_run(variable_cfg(4, tol=1e-5))


# --------------------------------------------------------------------------- 1


def test_criterion_1_stationary_cap(run1, verdict):
    rep, wall = run1
    worst = max([rep.initial_residual_inf] + list(rep.trace.residual_inf))
    start = []
    for n in (64, 128):
        g = build_grid(PI3, 2, n, 2 * n)
        start.append(stationary_residual(g, ell_field(g), 1.0, make_power(3, PI3, 2))[1])
    ratio = start[0] / start[1]
    ok = rep.initial_residual_inf <= 5e-3 and worst <= 5e-3 and rep.state.t >= 1.0 - 1e-12 and 3.5 <= ratio <= 4.5 and wall < 30
    verdict("CRITERION 1", ok, f"startup residual {rep.initial_residual_inf:.3e}, max over [0,{rep.state.t:.3g}] {worst:.3e}, refinement ratio {ratio:.3f}, runtime {wall:.1f}s")


# --------------------------------------------------------------------------- 2


def test_criterion_2_logistic_oracle(run2, verdict):
    rep, wall = run2
    ell = ell_field(rep.grid)
    u = rep.samples[2.0] / ell
    spread = (u.max() - u.min()) / u.mean()
    err = float(np.max(np.abs(u - logistic(0.5, 1.0, 2.0))))
    final_spread = np.ptp(rep.state.h / ell) / np.mean(rep.state.h / ell)
    ok = spread <= 1e-5 and final_spread <= 1e-5 and err <= 1e-4 and rep.status == "converged" and rep.residual_inf <= 1e-6 and rep.state.t < 20 and wall < 10
    verdict(
        "CRITERION 2", ok,
        f"spread(t=2) {spread:.2e}, |u-u_exact|(t=2) {err:.2e}, status {rep.status} at t={rep.state.t:.3f}, residual {rep.residual_inf:.2e}, runtime {wall:.1f}s",
    )


# --------------------------------------------------------------------------- 3


def recheck(rep):
    """Robin defect, convexity, and residual after resampling onto 128 x 256."""
    g = rep.grid
    h = rep.state.h
    cot = 1 / math.tan(g.theta)
    defect = robin_defect(g, h, cot)
    convex = bool(curvature_bundle(g, h).convex)
    fine = build_grid(g.theta, 2, 2 * g.n_rho, 2 * g.n_phi)
    hf = resample(g, h, fine, cot)
    return defect, convex, fine, hf


def criterion_3_line(rep, wall, p):
    g = rep.grid
    defect, convex, fine, hf = recheck(rep)
    fine_res = stationary_residual(fine, hf, 1 + 0.3 * fine.xi[2], make_power(p, g.theta, 2))[1] if convex and np.all(hf > 0) else math.inf
    ok = (
        rep.status == "converged" and rep.residual_inf <= 1e-3 and defect <= 10 * g.d_rho**2 and convex and fine_res <= 4e-4 and wall < 120
    )
    detail = (
        f"p={p:g}: status {rep.status} at t={rep.state.t:.3g}, residual {rep.residual_inf:.3e}, min u {np.min(rep.state.h / ell_field(g)):.3f}, "
        f"Robin defect {defect:.2e} (10 dr^2 = {10 * g.d_rho**2:.2e}), convex {convex}, 128x256 residual {fine_res:.3e}, runtime {wall:.1f}s"
    )
    return ok, detail


def test_criterion_3_variable_f(run3, verdict):
    # run as specified (p = 3 = n + 1); the barrier condition fails for this data
    rep, wall = run3
    ok, detail = criterion_3_line(rep, wall, 3.0)
    verdict("CRITERION 3", ok, detail + f", barrier passes {rep.condition.passes}")


def test_supplement_3b_variable_f_p4(run3b, verdict):
    rep, wall = run3b
    ok, detail = criterion_3_line(rep, wall, 4.0)
    verdict("SUPPLEMENT 3b", ok, detail + f", barrier passes {rep.condition.passes}, run tolerance 1e-5")


# --------------------------------------------------------------------------- 4


def monotone_and_identity(rep):
    J = np.asarray(rep.trace.J)
    J_all = np.concatenate([[rep.initial_state.J], J])
    rises = np.diff(J_all) - 1e-8 * (1 + np.abs(J_all[:-1]))
    worst_rise = float(rises.max()) if rises.size else -math.inf
    D = np.asarray(rep.trace.dissipation)
    dt = rep.trace.dt[-1]
    slope = (J_all[-1] - J_all[-2]) / dt
    # trapezoid over the last step matches the secant slope to O(dt^2)
    d_mid = 0.5 * (D[-1] + D[-2]) if D.size > 1 else D[-1]
    mismatch = abs(slope - d_mid)
    ok = worst_rise <= 0 and mismatch <= max(1e-6, 0.05 * abs(d_mid))
    return ok, f"max J rise over tolerance {worst_rise:.2e}, final dJ/dt {slope:.3e} vs dissipation {d_mid:.3e} (dt {dt:.3g})"


def test_criterion_4_monotonicity(run2, run3, verdict):
    ok2, d2 = monotone_and_identity(run2[0])
    ok3, d3 = monotone_and_identity(run3[0])
    verdict("CRITERION 4", ok2 and ok3, f"run 2: {d2}; run 3: {d3}")


def test_supplement_4b_monotonicity_p4(run3b, verdict):
    ok, d = monotone_and_identity(run3b[0])
    verdict("SUPPLEMENT 4b", ok, f"p=4 run: {d}")


# --------------------------------------------------------------------------- 5


def monitor_check(rep):
    ell = ell_field(rep.grid)
    lower = min(float(np.min(rep.initial_state.h / ell)), rep.levels.s_minus) - 1e-6
    min_u = min(r.min_u for r in rep.rows)
    min_slack = min(r.grad_bound_slack for r in rep.rows)
    min_radius = min(r.min_radius for r in rep.rows)
    ok = min_u >= lower and min_slack >= -1e-6 and min_radius > 0 and len(rep.rows) > 0
    return ok, f"min u {min_u:.6f} (floor {lower:.6f}, s- {rep.levels.s_minus:.4g}), min gradient slack {min_slack:.2e}, min radius {min_radius:.4f}"


def test_criterion_5_bound_monitors(run2, run3, verdict):
    ok2, d2 = monitor_check(run2[0])
    ok3, d3 = monitor_check(run3[0])
    verdict("CRITERION 5", ok2 and ok3, f"run 2: {d2}; run 3: {d3}")


# --------------------------------------------------------------------------- 6


def test_criterion_6_volume_oracles(verdict):
    g2 = build_grid(PI3, 2, 64, 128)
    g1 = build_grid(PI3, 1, 400)
    exact2 = math.pi * 0.25 * (3 - 0.5) / 3
    exact1 = PI3 - math.sin(PI3) * math.cos(PI3)
    v2 = volume(g2, ell_field(g2))
    v1 = volume(g1, ell_field(g1))
    poly = polyhedral_volume(embed(g2, ell_field(g2)))
    e2, e1, ep = abs(v2 / exact2 - 1), abs(v1 / exact1 - 1), abs(poly / v2 - 1)
    verdict("CRITERION 6", e2 <= 1e-4 and e1 <= 1e-6 and ep <= 1e-2, f"n=2 rel err {e2:.2e}, n=1 rel err {e1:.2e}, polyhedral vs quadrature {ep:.2e}")


# --------------------------------------------------------------------------- 7


def _ell_identity_error(n):
    g = build_grid(PI3, 2, n, 2 * n)
    ell = ell_field(g)
    b = covariant_hessian(g, fill_robin_ghosts(g, ell, 1 / math.tan(PI3))) + ell[..., None, None] * np.eye(2)
    return float(np.max(np.abs(b - np.eye(2))))


def _commutator_fields(g, fn):
    G = exact_ghosted(g, fn)
    grad = np.moveaxis(gradient(g, G), 0, -1)
    T = covariant_derivative(g, covariant_hessian(g, G))
    eye = np.eye(2)
    e = np.einsum("...kij->...ijk", T) - T - np.einsum("...k,ij->...ijk", grad, eye) + np.einsum("...j,ki->...ijk", grad, eye)
    # the outermost row needs second-layer ghosts that are not formed
    e = np.sqrt(np.sum(e**2, axis=(-1, -2, -3)))
    e[-1] = 0.0
    return e


_FIELDS = {
    "ell": lambda r, p: 1 - math.cos(PI3) * np.cos(r),
    "cos": lambda r, p: np.cos(r),
    "x1": lambda r, p: np.sin(r) * np.cos(p),
    "x1x2+x3^3": lambda r, p: np.sin(r) ** 2 * np.cos(p) * np.sin(p) + np.cos(r) ** 3,
}


def order(errs):
    return [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]


def test_criterion_7_calculus_identities(verdict):
    res = (32, 64, 128)
    ell_orders = order([_ell_identity_error(n) for n in res])
    comm = {}
    pole_max = {}
    for name, fn in _FIELDS.items():
        l2, mx = [], []
        for n in res:
            g = build_grid(PI3, 2, n, 2 * n)
            e = _commutator_fields(g, fn)
            l2.append(math.sqrt(integrate(g, e**2)))
            mx.append(float(e.max()))
        comm[name] = order(l2)
        pole_max[name] = order(mx)
    ok = min(ell_orders) >= 1.8 and all(min(o) >= 0.9 for o in comm.values())
    detail = "Hessian identity orders " + ", ".join(f"{o:.2f}" for o in ell_orders) + "; commutator L2 orders " + "; ".join(
        f"{k}: " + ", ".join(f"{o:.2f}" for o in v) for k, v in comm.items()
    )
    detail += " | max-norm orders (informational) " + "; ".join(f"{k}: " + ", ".join(f"{o:.2f}" for o in v) for k, v in pole_max.items())
    verdict("CRITERION 7", ok, detail)


# --------------------------------------------------------------------------- 8


def _cfg_file(tmp_path, name, n, p, f, n_rho=32):
    data = {"theta": PI3, "n": n, "grid": {"n_rho": n_rho, **({"n_phi": 2 * n_rho} if n == 2 else {})}, "phi": {"kind": "power", "p": p}, "f": f, "h0": {"scale": 1.0}}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_criterion_8_barrier_checker(tmp_path, verdict, capsys):
    g1 = build_grid(PI3, 1, 64)
    g2 = build_grid(PI3, 2, 32, 64)

    def passes(g, p, f):
        return check_barrier_condition(make_power(p, PI3, g.dim_n), f, g).passes

    # for n = 1 the height coordinate x_{n+1} is x2
    checks = {
        "p=3 n=1 f=1": (passes(g1, 3, np.ones(g1.shape)), True),
        "p=3 n=1 f=1+0.3*x2": (passes(g1, 3, 1 + 0.3 * g1.xi[1]), True),
        "p=1 n=1": (passes(g1, 1, np.ones(g1.shape)), False),
        "p=1 n=2": (passes(g2, 1, np.ones(g2.shape)), False),
        "p=n+1 n=1": (passes(g1, 2, np.ones(g1.shape)), False),
        "p=n+1 n=2 f=1": (passes(g2, 3, np.ones(g2.shape)), False),
        "p=n+1 n=2 f=1+0.3*x3": (passes(g2, 3, 1 + 0.3 * g2.xi[2]), False),
    }
    codes = {
        "pass -> 0": (run_command(["check-condition", "--config", _cfg_file(tmp_path, "a", 1, 3, "1+0.3*x2")]), 0),
        "p=1 -> 1": (run_command(["check-condition", "--config", _cfg_file(tmp_path, "b", 1, 1, "1")]), 1),
        "p=n+1 -> 1": (run_command(["check-condition", "--config", _cfg_file(tmp_path, "c", 2, 3, "1+0.3*x3")]), 1),
        "invalid -> 3": (run_command(["check-condition", "--config", str(tmp_path / "none.json")]), 3),
    }
    capsys.readouterr()
    ok = all(a == b for a, b in checks.values()) and all(a == b for a, b in codes.values())
    detail = "; ".join(f"{k} {'passes' if a else 'fails'}" for k, (a, _) in checks.items()) + "; exit codes " + ", ".join(f"{k} got {a}" for k, (a, _) in codes.items())
    verdict("CRITERION 8", ok, detail)


# --------------------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path, verdict, capsys):
    cfg = {"theta": PI4, "n": 1, "grid": {"n_rho": 400}, "phi": {"kind": "power", "p": 3}, "f": "1", "h0": {"scale": 0.5}, "t_max": 20, "tol_residual": 1e-6, "seed": 11}
    path = tmp_path / "logistic.json"
    path.write_text(json.dumps(cfg))
    codes = [run_command(["run", "--quiet", "--config", str(path), "--out", str(tmp_path / f"o{k}"), "--seed", "11"]) for k in (0, 1)]
    capsys.readouterr()
    a = (tmp_path / "o0" / "timeseries.csv").read_bytes()
    b = (tmp_path / "o1" / "timeseries.csv").read_bytes()
    ok = codes == [0, 0] and a == b and len(a) > 0
    verdict("CRITERION 9", ok, f"exit codes {codes}, timeseries bytes {len(a)} vs {len(b)}, identical {a == b}")
