import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from capflow.curvature import (
    NonConvexError,
    area_measure_density,
    bundle_from_b,
    curvature_bundle,
    embed,
    mesh_to_obj,
    polyhedral_volume,
    second_fundamental_form,
)
from capflow.geometry import build_grid, ell_field, integrate

from conftest import THETA


def flat_mode(g):
    """Perturbation with zero normal slope at the boundary, so ell * (1 + a m) stays Robin-consistent."""
    r = (g.rho / g.theta)[:, None]
    return (r**2 - 0.5 * r**4) * np.cos(2 * g.phi)[None, :]


class TestSecondFundamentalForm:
    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
    def test_cap_family(self, r):
        errs = []
        for n in (32, 64):
            g = build_grid(THETA, 2, n, 2 * n)
            b = second_fundamental_form(g, r * ell_field(g))
            errs.append(np.max(np.abs(b - r * np.eye(2))))
        assert errs[1] < 1e-3 * r and errs[0] / errs[1] > 3.5

    def test_cos_rho_degenerate(self, grid2):
        # b vanishes to truncation; cos(rho) is not Robin-consistent, so the last rows are excluded
        h = np.cos(grid2.rho)[:, None] * np.ones(grid2.shape)
        b = second_fundamental_form(grid2, h)
        assert np.max(np.abs(b[:-3])) < 10 * grid2.d_rho**2
        assert curvature_bundle(grid2, h).radii[..., 0].min() < 10 * grid2.d_rho**2

    def test_non_positive_rejected(self, grid2):
        with pytest.raises(NonConvexError):
            second_fundamental_form(grid2, ell_field(grid2) - 0.6)

    @pytest.mark.parametrize("c,tol", [(2.0, 1e-12), (0.5, 1e-12), (2.5, 1e-8)])
    def test_linear_scaling(self, grid2, c, tol):
        # powers of two scale exactly; other factors pick up rounding near the pole
        h = ell_field(grid2) * (1 + 0.05 * flat_mode(grid2))
        b1 = second_fundamental_form(grid2, h)
        b2 = second_fundamental_form(grid2, c * h)
        assert np.max(np.abs(b2 - c * b1)) < tol * np.max(np.abs(b2))
        k1 = curvature_bundle(grid2, h).gauss_k
        k2 = curvature_bundle(grid2, c * h).gauss_k
        assert np.max(np.abs(k2 - c**-2 * k1) / k2) < tol


class TestBundle:
    def test_scaled_identity(self):
        bb = bundle_from_b(np.broadcast_to(2 * np.eye(2), (3, 4, 2, 2)).copy())
        assert np.allclose(bb.gauss_k, 0.25) and bb.convex

    def test_diag(self):
        bb = bundle_from_b(np.diag([1.0, 2.0])[None, None])
        assert bb.gauss_k[0, 0] == pytest.approx(0.5)
        assert np.allclose(bb.radii[0, 0], [1, 2])

    def test_offdiag(self):
        bb = bundle_from_b(np.array([[2.0, 1.0], [1.0, 2.0]])[None, None])
        assert np.allclose(bb.radii[0, 0], [1, 3])
        assert bb.gauss_k[0, 0] == pytest.approx(1 / 3)

    def test_non_convex_flag(self):
        bb = bundle_from_b(np.array([[1.0, 0.0], [0.0, -1.0]])[None, None])
        assert not bb.convex and np.isnan(bb.gauss_k[0, 0])

    @given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-3, 3))
    def test_eigen_consistency(self, a, d, c):
        b = np.array([[a, c], [c, d]])[None, None]
        bb = bundle_from_b(b)
        lo, hi = bb.radii[0, 0]
        assert lo <= hi
        assert lo * hi == pytest.approx(bb.detb[0, 0], rel=1e-10, abs=1e-12)
        assert lo + hi == pytest.approx(bb.trace[0, 0], rel=1e-12)
        if bb.convex:
            assert bb.detb[0, 0] * bb.gauss_k[0, 0] == pytest.approx(1.0, rel=1e-12)


class TestEmbed:
    @pytest.mark.parametrize("r", [1.0, 2.0])
    def test_cap_sphere(self, grid2, r):
        mesh = embed(grid2, r * ell_field(grid2))
        centre = r * math.cos(THETA) * np.array([0, 0, -1.0])
        dist = np.linalg.norm(mesh.vertices - centre, axis=1)
        assert np.max(np.abs(dist - r)) < 10 * r * grid2.d_rho**2

    def test_support_round_trip(self, grid2):
        h = ell_field(grid2) * (1 + 0.05 * flat_mode(grid2))
        mesh = embed(grid2, h)
        nu = grid2.normal()
        assert np.max(np.abs(np.sum(mesh.node_vertices * nu, axis=0) - h)) < 1e-10

    def test_apex(self):
        g = build_grid(THETA, 2, 128, 16)
        mesh = embed(g, ell_field(g))
        assert np.allclose(mesh.vertices[0], [0, 0, 1 - math.cos(THETA)], atol=1e-4)

    def test_boundary_on_plane(self, grid2):
        h = ell_field(grid2) * (1 + 0.1 * flat_mode(grid2))
        mesh = embed(grid2, h)
        assert np.max(np.abs(mesh.vertices[mesh.boundary, 2])) < 1e-10
        assert np.min(mesh.vertices[:, 2]) > -10 * grid2.d_rho**2

    def test_n1_profile(self, grid1):
        mesh = embed(grid1, ell_field(grid1))
        assert np.allclose(mesh.vertices[:, 1], 0)
        assert np.max(np.abs(mesh.vertices[mesh.boundary, 2])) < 1e-10

    def test_rejects_non_convex(self, grid2):
        h = ell_field(grid2) * (1 + 0.9 * np.cos(6 * grid2.phi)[None, :] * np.sin(grid2.rho)[:, None] ** 6)
        with pytest.raises(NonConvexError):
            embed(grid2, h)


class TestPolyhedralVolume:
    def test_cap_volume(self, grid2):
        exact = math.pi * 0.25 * (3 - 0.5) / 3
        assert polyhedral_volume(embed(grid2, ell_field(grid2))) == pytest.approx(exact, rel=1e-2)

    def test_refines(self):
        exact = 8 * math.pi * 0.25 * (3 - 0.5) / 3
        errs = []
        for n in (16, 32, 64):
            g = build_grid(THETA, 2, n, 2 * n)
            errs.append(abs(polyhedral_volume(embed(g, 2 * ell_field(g))) - exact))
        assert errs[0] > errs[1] > errs[2]

    def test_n1_segment(self, grid1):
        exact = THETA - math.sin(THETA) * math.cos(THETA)
        assert polyhedral_volume(embed(grid1, ell_field(grid1))) == pytest.approx(exact, rel=1e-4)


class TestAreaMeasure:
    def test_density_is_ell(self, grid2):
        ell = ell_field(grid2)
        assert np.max(np.abs(area_measure_density(grid2, ell) - ell)) < 2e-4

    def test_scaled(self, grid2):
        ell = ell_field(grid2)
        assert np.max(np.abs(area_measure_density(grid2, 2 * ell) - 4 * ell)) < 1e-3

    def test_total_mass(self, grid2):
        assert integrate(grid2, area_measure_density(grid2, ell_field(grid2))) == pytest.approx(0.625 * math.pi, rel=1e-4)


def test_obj_text(grid2):
    text = mesh_to_obj(embed(grid2, ell_field(grid2)))
    lines = text.splitlines()
    nv = sum(1 for ln in lines if ln.startswith("v "))
    nf = sum(1 for ln in lines if ln.startswith("f "))
    assert nv == 1 + grid2.n_nodes + grid2.n_phi
    assert nf == grid2.n_phi * (2 * grid2.n_rho + 1)
    assert any(ln.startswith("l ") for ln in lines)
    idx = [int(tok) for ln in lines if ln.startswith("f ") for tok in ln.split()[1:]]
    assert min(idx) == 1 and max(idx) == nv
