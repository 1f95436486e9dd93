"""Curvature of a capillary hypersurface from its capillary support function.

With b_ij = Hess(h)_ij + h delta_ij on C_theta, the Gauss curvature is
K = 1 / det b and the principal radii are the eigenvalues of b.  The surface
itself is recovered as X = h nu + grad h with nu = xi - cos(theta) e.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CapGrid,
    boundary_values,
    covariant_hessian,
    ell_field,
    fill_robin_ghosts,
    gradient,
)

__all__ = [
    "NonConvexError",
    "CurvatureBundle",
    "EmbeddedMesh",
    "second_fundamental_form",
    "curvature_bundle",
    "bundle_from_b",
    "embed",
    "area_measure_density",
    "polyhedral_volume",
    "mesh_to_obj",
]


class NonConvexError(ValueError):
    """The support field does not describe a strictly convex surface."""


def _check_positive(h):
    h = np.asarray(h, dtype=float)
    if not np.all(h > 0):
        raise NonConvexError(f"support function must be positive; min h = {np.min(h):g}")
    return h


def second_fundamental_form(grid: CapGrid, h: np.ndarray) -> np.ndarray:
    """b = Hess(h) + h I with h extended by the capillary Robin condition."""
    h = _check_positive(h)
    G = fill_robin_ghosts(grid, h, 1.0 / np.tan(grid.theta))
    b = covariant_hessian(grid, G)
    for i in range(grid.dim_n):
        b[..., i, i] += h
    return b


@dataclass(eq=False)
class CurvatureBundle:
    b: np.ndarray
    detb: np.ndarray
    gauss_k: np.ndarray  # NaN where det b <= 0
    radii: np.ndarray  # (..., n) ascending
    convex: bool

    @property
    def trace(self) -> np.ndarray:
        return np.trace(self.b, axis1=-2, axis2=-1)


def bundle_from_b(b: np.ndarray) -> CurvatureBundle:
    n = b.shape[-1]
    if n == 1:
        detb = b[..., 0, 0].copy()
        radii = b[..., 0, :].copy()
    else:
        a, c, d = b[..., 0, 0], b[..., 0, 1], b[..., 1, 1]
        detb = a * d - c * c
        half_tr = 0.5 * (a + d)
        disc = np.sqrt(0.25 * (a - d) ** 2 + c * c)
        hi = half_tr + disc
        # small root via det/hi avoids cancellation when hi >> lo > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            lo = np.minimum(np.where(hi > 0, detb / hi, half_tr - disc), hi)
        radii = np.stack([lo, hi], axis=-1)
    convex = bool(np.all(radii[..., 0] > 0) and np.all(detb > 0))
    with np.errstate(divide="ignore"):
        gauss_k = np.where(detb > 0, 1.0 / detb, np.nan)
    return CurvatureBundle(b=b, detb=detb, gauss_k=gauss_k, radii=radii, convex=convex)


def curvature_bundle(grid: CapGrid, h: np.ndarray) -> CurvatureBundle:
    """Second fundamental form, det b, K = 1/det b and principal radii.

    Non-convexity is reported through ``convex`` rather than raised; K holds
    NaN at the offending nodes so that any integral touching them is poisoned.
    """
    return bundle_from_b(second_fundamental_form(grid, h))


def area_measure_density(grid: CapGrid, h: np.ndarray) -> np.ndarray:
    """Density ell / K of the capillary area measure."""
    bundle = curvature_bundle(grid, h)
    if not bundle.convex:
        raise NonConvexError("area measure density needs a strictly convex support field")
    return ell_field(grid) * bundle.detb


@dataclass(eq=False)
class EmbeddedMesh:
    vertices: np.ndarray  # (V, 3); n = 1 lives in the x-z plane
    faces: np.ndarray  # (F, 3) triangles, outward oriented; empty for n = 1
    boundary: np.ndarray  # vertex indices of the boundary polyline
    curve: np.ndarray  # ordered vertex indices of the profile (n = 1), else empty
    node_vertices: np.ndarray  # (n+1, n_rho, n_phi) positions at grid nodes


def embed(grid: CapGrid, h: np.ndarray) -> EmbeddedMesh:
    """Reconstruct the surface X = h nu + grad h from a convex support field."""
    h = _check_positive(h)
    bundle = curvature_bundle(grid, h)
    if not bundle.convex:
        raise NonConvexError("cannot embed a non-convex support field")
    cot = 1.0 / np.tan(grid.theta)
    G = fill_robin_ghosts(grid, h, cot)
    grad = gradient(grid, G)
    nu = grid.normal()
    frame = grid.frame()
    X = h[None] * nu + np.einsum("i...,ia...->a...", grad, frame)

    t = grid.theta
    hb = boundary_values(grid, G)
    if grid.dim_n == 1:
        # boundary points: X = h_b nu_b + (cot h_b) mu_b
        Xb = hb[None, :] * (grid.xi_boundary - np.cos(t) * grid.e[:, None]) + cot * hb[None, :] * grid.mu_boundary
        pts = np.concatenate([Xb[:, :1], X[:, :, 0], Xb[:, 1:]], axis=1)
        verts = np.stack([pts[0], np.zeros(pts.shape[1]), pts[1]], axis=1)
        nv = verts.shape[0]
        return EmbeddedMesh(
            vertices=verts,
            faces=np.zeros((0, 3), dtype=int),
            boundary=np.array([0, nv - 1]),
            curve=np.arange(nv),
            node_vertices=X,
        )

    n_rho, n_phi = grid.shape
    nu_b = grid.xi_boundary - np.cos(t) * grid.e[:, None]
    # tangential derivative along the boundary circle (periodic centred difference)
    h_tan = (np.roll(hb, -1) - np.roll(hb, 1)) / (2 * grid.d_phi * np.sin(t))
    e_phi_b = np.stack([-np.sin(grid.phi), np.cos(grid.phi), np.zeros(n_phi)])
    Xb = hb * nu_b + cot * hb * grid.mu_boundary + h_tan * e_phi_b
    apex = X[:, 0, :].mean(axis=1)

    verts = np.concatenate([apex[None], X.reshape(3, -1).T, Xb.T], axis=0)

    def vid(j, k):
        return 1 + j * n_phi + (k % n_phi)

    faces = []
    for k in range(n_phi):
        faces.append((0, vid(0, k), vid(0, k + 1)))
    for j in range(n_rho - 1):
        for k in range(n_phi):
            a, b_, c, d = vid(j, k), vid(j + 1, k), vid(j + 1, k + 1), vid(j, k + 1)
            faces.append((a, b_, c))
            faces.append((a, c, d))
    base = 1 + n_rho * n_phi
    for k in range(n_phi):
        a, d = vid(n_rho - 1, k), vid(n_rho - 1, k + 1)
        b_, c = base + k, base + (k + 1) % n_phi
        faces.append((a, b_, c))
        faces.append((a, c, d))
    faces = np.array(faces, dtype=int)
    # orient outward: normals must point away from the cap interior (+z side at the apex)
    tri = verts[faces]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if nrm[0, 2] < 0:
        faces = faces[:, ::-1]
    return EmbeddedMesh(
        vertices=verts,
        faces=faces,
        boundary=base + np.arange(n_phi),
        curve=np.zeros(0, dtype=int),
        node_vertices=X,
    )


def polyhedral_volume(mesh: EmbeddedMesh) -> float:
    """Volume enclosed by the mesh and the plane x_{n+1} = 0.

    The closing bottom face lies in the plane through the origin and so adds
    nothing to the divergence-theorem sum over the upper surface.
    """
    v = mesh.vertices
    if mesh.faces.size == 0:
        # n = 1: shoelace area of the profile closed along the x axis
        x, z = v[mesh.curve, 0], v[mesh.curve, 2]
        return float(0.5 * abs(np.sum(x[:-1] * z[1:] - x[1:] * z[:-1]) + (x[-1] * z[0] - x[0] * z[-1])))
    tri = v[mesh.faces]
    return float(np.sum(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))) / 6.0)


def mesh_to_obj(mesh: EmbeddedMesh) -> str:
    """Wavefront OBJ text: ``v`` vertices, ``f`` triangles, ``l`` boundary/profile lines."""
    lines = ["# capillary hypersurface"]
    lines += [f"v {x:.12g} {y:.12g} {z:.12g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    if mesh.curve.size:
        lines.append("l " + " ".join(str(i + 1) for i in mesh.curve))
    if mesh.faces.size:
        loop = list(mesh.boundary) + [mesh.boundary[0]]
        lines.append("l " + " ".join(str(i + 1) for i in loop))
    return "\n".join(lines) + "\n"
