import math

import numpy as np
import pytest
from hypothesis import settings

from capflow.geometry import Ghosted, build_grid

settings.register_profile("capflow", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("capflow")

THETA = math.pi / 3


def exact_ghosted(grid, fn):
    """Pad ``fn(rho, phi)`` with exact outer ghosts and the pole mirror (test data only)."""
    if grid.dim_n == 1:
        rho = np.concatenate([[grid.rho[0] - grid.d_rho], grid.rho, [grid.rho[-1] + grid.d_rho]])
        return Ghosted(fn(rho, np.zeros_like(rho))[:, None])
    rho = np.concatenate([[-grid.rho[0]], grid.rho, [grid.rho[-1] + grid.d_rho]])
    R, P = np.meshgrid(rho, grid.phi, indexing="ij")
    U = fn(R, P)
    U[0] = np.roll(U[1], grid.n_phi // 2)
    return Ghosted(U)


@pytest.fixture(scope="session")
def grid2():
    return build_grid(THETA, 2, 64, 128)


@pytest.fixture(scope="session")
def grid1():
    return build_grid(THETA, 1, 400)
