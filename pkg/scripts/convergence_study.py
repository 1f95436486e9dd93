"""Grid refinement of the stationary cap residual and the calculus identities.

    python scripts/convergence_study.py --theta 1.0472 --levels 16 32 64 128
"""

import argparse
import math
from dataclasses import dataclass, field

import numpy as np

from capflow.flow import stationary_residual
from capflow.geometry import build_grid, covariant_hessian, ell_field, fill_robin_ghosts
from capflow.diagnostics import volume
from capflow.orlicz import make_power


@dataclass
class StudyConfig:
    theta: float = math.pi / 3
    levels: list = field(default_factory=lambda: [16, 32, 64, 128])


def hessian_identity_error(grid):
    ell = ell_field(grid)
    b = covariant_hessian(grid, fill_robin_ghosts(grid, ell, 1 / math.tan(grid.theta)))
    b = b + ell[..., None, None] * np.eye(grid.dim_n)
    return float(np.max(np.abs(b - np.eye(grid.dim_n))))


def main(cfg: StudyConfig):
    exact_v = math.pi * (1 - math.cos(cfg.theta)) ** 2 * (2 + math.cos(cfg.theta)) / 3
    print(f"{'n_rho':>6} {'residual':>11} {'ratio':>6} {'hess err':>11} {'ratio':>6} {'vol err':>11}")
    prev = None
    for n in cfg.levels:
        g = build_grid(cfg.theta, 2, n, 2 * n)
        res = stationary_residual(g, ell_field(g), 1.0, make_power(3, cfg.theta, 2))[1]
        he = hessian_identity_error(g)
        ve = abs(volume(g, ell_field(g)) / exact_v - 1)
        r1 = f"{prev[0] / res:6.2f}" if prev else " " * 6
        r2 = f"{prev[1] / he:6.2f}" if prev else " " * 6
        print(f"{n:6d} {res:11.3e} {r1} {he:11.3e} {r2} {ve:11.3e}")
        prev = (res, he)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--theta", type=float, default=StudyConfig.theta)
    ap.add_argument("--levels", type=int, nargs="+", default=StudyConfig().levels)
    a = ap.parse_args()
    main(StudyConfig(theta=a.theta, levels=a.levels))
