"""Discrete spherical cap C_theta and the calculus on it.

Nodes live on a cell-centred grid in geodesic polar coordinates about the apex
of the unit cap ``{xi : |xi - cos(theta) e| = 1, xi_{n+1} >= 0}`` with
``e = -E_{n+1}``.  For n = 2 the coordinates are (rho, phi) with rho in
(0, theta); for n = 1 a single angle alpha in (-theta, theta) is used.  Fields
are arrays of shape ``(n_rho, n_phi)`` (``n_phi == 1`` when n = 1).

Boundary treatment lives in :func:`fill_robin_ghosts`, which pads a field with
one ghost row on each radial end.  For n = 2 the inner row is the pole mirror
(the node at ``(dr/2, phi + pi)``); outer rows enforce a Robin condition
``d_mu u = c u`` at ``rho = theta`` with a cubic one-sided closure, so ghost
values are accurate to O(dr^4) and second differences stay O(dr^2) up to the
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CapGrid",
    "Ghosted",
    "GhostLayerError",
    "build_grid",
    "ell_field",
    "fill_robin_ghosts",
    "resample",
    "gradient",
    "covariant_hessian",
    "covariant_derivative",
    "integrate",
    "robin_defect",
    "boundary_values",
    "polar_filter",
]

# Cubic closure through (ghost, u_N, u_{N-1}, u_{N-2}) at offsets
# (+1/2, -1/2, -3/2, -5/2) cells from the boundary: value and d/dx at 0.
_V4 = np.array([5 / 16, 15 / 16, -5 / 16, 1 / 16])
_D4 = np.array([23 / 24, -7 / 8, -1 / 8, 1 / 24])
# Interior-only quadratic through (u_N, u_{N-1}, u_{N-2}).
_V3 = np.array([15 / 8, -5 / 4, 3 / 8])
_D3 = np.array([2.0, -3.0, 1.0])
# Midpoint rule end corrections (Euler-Maclaurin with one-sided g').
_END_CORRECTION = np.array([2 / 24, -3 / 24, 1 / 24])


class GhostLayerError(ValueError):
    """Raised when a stencil needs ghost values that were never filled."""


@dataclass(eq=False)
class CapGrid:
    theta: float
    dim_n: int
    n_rho: int
    n_phi: int
    d_rho: float
    d_phi: float
    rho: np.ndarray  # (n_rho,) radial coordinate, or alpha for n = 1
    phi: np.ndarray  # (n_phi,)
    xi: np.ndarray  # (n+1, n_rho, n_phi) ambient coordinates
    weights: np.ndarray  # (n_rho, n_phi)
    xi_boundary: np.ndarray  # (n+1, n_b) points of the boundary of C_theta
    mu_boundary: np.ndarray  # (n+1, n_b) outward co-normal there
    boundary_rows: tuple[int, ...] = field(default=())

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rho, self.n_phi)

    @property
    def n_nodes(self) -> int:
        return self.n_rho * self.n_phi

    @property
    def e(self) -> np.ndarray:
        e = np.zeros(self.dim_n + 1)
        e[-1] = -1.0
        return e

    @property
    def area(self) -> float:
        """Closed-form measure of C_theta."""
        if self.dim_n == 1:
            return 2.0 * self.theta
        return 2.0 * np.pi * (1.0 - np.cos(self.theta))

    def normal(self) -> np.ndarray:
        """Unit sphere point nu = xi - cos(theta) e at every node."""
        return self.xi - np.cos(self.theta) * self.e[:, None, None]

    def frame(self) -> np.ndarray:
        """Ambient components of the orthonormal frame, shape (n, n+1, n_rho, n_phi)."""
        R = self.rho[:, None] * np.ones(self.shape)
        if self.dim_n == 1:
            return np.stack([np.cos(R), -np.sin(R)])[None]
        P = self.phi[None, :] * np.ones(self.shape)
        e_rho = np.stack([np.cos(R) * np.cos(P), np.cos(R) * np.sin(P), -np.sin(R)])
        e_phi = np.stack([-np.sin(P), np.cos(P), np.zeros_like(R)])
        return np.stack([e_rho, e_phi])


def build_grid(theta: float, dim_n: int, n_rho: int, n_phi: int = 1) -> CapGrid:
    """Build the cell-centred cap grid.

    For n = 2, ``n_phi`` must be even so that the pole mirror of every node is
    itself a node.
    """
    if not (0.0 < theta < np.pi / 2):
        raise ValueError(f"theta must lie in (0, pi/2), got {theta!r}")
    if dim_n not in (1, 2):
        raise ValueError(f"dim_n must be 1 or 2, got {dim_n!r}")
    if n_rho < 8:
        raise ValueError(f"n_rho must be at least 8, got {n_rho}")
    if dim_n == 2 and (n_phi < 8 or n_phi % 2):
        raise ValueError(f"n_phi must be even and at least 8 for n=2, got {n_phi}")

    ct = np.cos(theta)
    if dim_n == 1:
        n_phi = 1
        d_rho = 2.0 * theta / n_rho
        rho = -theta + (np.arange(n_rho) + 0.5) * d_rho
        phi = np.zeros(1)
        a = rho[:, None]
        xi = np.stack([np.sin(a), np.cos(a) - ct])
        w = np.full((n_rho, 1), d_rho)
        corr = np.ones(n_rho)
        corr[:3] += _END_CORRECTION
        corr[-3:] += _END_CORRECTION[::-1]
        w = w * corr[:, None]
        xi_b = np.array([[-np.sin(theta), np.sin(theta)], [0.0, 0.0]])
        mu_b = np.array([[-ct, ct], [-np.sin(theta), -np.sin(theta)]])
        d_phi = 0.0
    else:
        d_rho = theta / n_rho
        d_phi = 2.0 * np.pi / n_phi
        rho = (np.arange(n_rho) + 0.5) * d_rho
        phi = np.arange(n_phi) * d_phi
        R, P = np.meshgrid(rho, phi, indexing="ij")
        xi = np.stack([np.sin(R) * np.cos(P), np.sin(R) * np.sin(P), np.cos(R) - ct])
        corr = np.ones(n_rho)
        corr[:3] += _END_CORRECTION
        corr[-3:] += _END_CORRECTION[::-1]
        w = (np.sin(R) * d_rho * d_phi) * corr[:, None]
        st = np.sin(theta)
        xi_b = np.stack([st * np.cos(phi), st * np.sin(phi), np.zeros(n_phi)])
        mu_b = np.stack([ct * np.cos(phi), ct * np.sin(phi), -st * np.ones(n_phi)])
    rows = (0, n_rho - 1) if dim_n == 1 else (n_rho - 1,)
    return CapGrid(
        theta=float(theta),
        dim_n=dim_n,
        n_rho=n_rho,
        n_phi=n_phi,
        d_rho=d_rho,
        d_phi=d_phi,
        rho=rho,
        phi=phi,
        xi=xi,
        weights=w,
        xi_boundary=xi_b,
        mu_boundary=mu_b,
        boundary_rows=rows,
    )


def ell_field(grid: CapGrid) -> np.ndarray:
    """Capillary support function of C_theta: sin^2 theta + cos theta <xi, e>."""
    t = grid.theta
    return np.sin(t) ** 2 + np.cos(t) * np.tensordot(grid.e, grid.xi, axes=1)


@dataclass(frozen=True, eq=False)
class Ghosted:
    """A field padded with one ghost row at each radial end."""

    values: np.ndarray  # (n_rho + 2, n_phi)

    @property
    def interior(self) -> np.ndarray:
        return self.values[1:-1]


def _robin_ghost(u1, u2, u3, c_dr):
    # Solve D4.(g,u) = c dr V4.(g,u) for g.
    num = (c_dr * _V4[1] - _D4[1]) * u1 + (c_dr * _V4[2] - _D4[2]) * u2 + (c_dr * _V4[3] - _D4[3]) * u3
    return num / (_D4[0] - c_dr * _V4[0])


def fill_robin_ghosts(grid: CapGrid, field: np.ndarray, coeff: float) -> Ghosted:
    """Pad ``field`` so that the outward normal derivative at the boundary equals ``coeff`` times the boundary value."""
    u = np.asarray(field, dtype=float)
    if u.shape != grid.shape:
        raise ValueError(f"field shape {u.shape} does not match grid {grid.shape}")
    if not np.isfinite(coeff):
        raise ValueError("Robin coefficient must be finite")
    c_dr = coeff * grid.d_rho
    out = np.empty((grid.n_rho + 2, grid.n_phi))
    out[1:-1] = u
    out[-1] = _robin_ghost(u[-1], u[-2], u[-3], c_dr)
    if grid.dim_n == 1:
        out[0] = _robin_ghost(u[0], u[1], u[2], c_dr)
    else:
        out[0] = np.roll(u[0], grid.n_phi // 2)
    return Ghosted(out)


def _fourier_resample(U: np.ndarray, m: int) -> np.ndarray:
    # trigonometric interpolation along axis 1 onto m equispaced angles
    n = U.shape[1]
    if m == n:
        return U.copy()
    F = np.fft.rfft(U, axis=1)
    k = min(n, m) // 2
    G = np.zeros((U.shape[0], m // 2 + 1), dtype=complex)
    G[:, : k + 1] = F[:, : k + 1]
    # the shorter grid's Nyquist mode is a pure cosine: halve it when it becomes
    # an ordinary mode, fold its sine part away when it becomes the new Nyquist
    G[:, k] = 0.5 * F[:, k] if n < m else 2.0 * F[:, k].real
    return np.fft.irfft(G, n=m, axis=1) * (m / n)


def resample(grid: CapGrid, field: np.ndarray, target: CapGrid, coeff: float) -> np.ndarray:
    """Interpolate a nodal field onto another grid over the same cap.

    Azimuthally by trigonometric interpolation, radially by a cubic spline
    through the pole (using the mirror identity u(-rho, phi) = u(rho, phi + pi))
    and the Robin ghost row ``d_mu u = coeff u``.  Accurate to O(dr^4) for
    smooth fields that satisfy the Robin condition; otherwise the ghost row
    is wrong at O(dr) and that error decays only over a few rows inward.
    """
    from scipy.interpolate import CubicSpline

    if target.dim_n != grid.dim_n or abs(target.theta - grid.theta) > 1e-15:
        raise ValueError("target grid must cover the same cap")
    G = fill_robin_ghosts(grid, field, coeff).values
    if grid.dim_n == 1:
        r = np.concatenate([[grid.rho[0] - grid.d_rho], grid.rho, [grid.rho[-1] + grid.d_rho]])
        return CubicSpline(r, G, axis=0)(target.rho)
    m = target.n_phi
    A = _fourier_resample(G, m)
    inner = np.roll(A[1:-1][::-1], m // 2, axis=1)
    line = np.concatenate([inner, A[1:]], axis=0)
    r = np.concatenate([-grid.rho[::-1], grid.rho, [grid.rho[-1] + grid.d_rho]])
    return CubicSpline(r, line, axis=0)(target.rho)


def _require_ghosts(grid: CapGrid, field) -> np.ndarray:
    if not isinstance(field, Ghosted):
        raise GhostLayerError("stencil needs a ghost layer; call fill_robin_ghosts first")
    if field.values.shape != (grid.n_rho + 2, grid.n_phi):
        raise GhostLayerError("ghost layer does not match grid")
    return field.values


def _partials(grid: CapGrid, U: np.ndarray):
    """Centred partial derivatives on the interior of a padded array."""
    dr = grid.d_rho
    c = U[1:-1]
    u_r = (U[2:] - U[:-2]) / (2 * dr)
    u_rr = (U[2:] - 2 * c + U[:-2]) / dr**2
    if grid.dim_n == 1:
        return u_r, u_rr, None, None, None
    # azimuthal derivatives are spectral: the direction is periodic and the
    # innermost ring magnifies any phi truncation error by 1/sin(rho)^2
    ik, k2 = _wavenumbers(grid.n_phi)
    F = np.fft.rfft(U, axis=1)
    U_p = np.fft.irfft(F * ik, n=grid.n_phi, axis=1)
    u_p = U_p[1:-1]
    u_pp = np.fft.irfft(F[1:-1] * k2, n=grid.n_phi, axis=1)
    u_rp = (U_p[2:] - U_p[:-2]) / (2 * dr)
    return u_r, u_rr, u_p, u_pp, u_rp


_WAVENUMBERS: dict[int, tuple] = {}


def _wavenumbers(n_phi: int):
    """(i m, -m^2) for rfft modes; the Nyquist mode gets no odd derivative."""
    w = _WAVENUMBERS.get(n_phi)
    if w is None:
        m = np.arange(n_phi // 2 + 1, dtype=float)
        ik = 1j * m
        ik[-1] = 0.0
        w = _WAVENUMBERS[n_phi] = (ik, -(m**2))
    return w


def gradient(grid: CapGrid, field: Ghosted) -> np.ndarray:
    """Frame components of the gradient, shape (n, n_rho, n_phi)."""
    U = _require_ghosts(grid, field)
    u_r, _, u_p, _, _ = _partials(grid, U)
    if grid.dim_n == 1:
        return u_r[None]
    return np.stack([u_r, u_p / np.sin(grid.rho)[:, None]])


def covariant_hessian(grid: CapGrid, field: Ghosted) -> np.ndarray:
    """Frame components of the spherical Hessian, shape (n_rho, n_phi, n, n).

    n = 2 uses the polar-coordinate forms
    H_rr = u_rr, H_rp = (u_rp - cot(rho) u_p) / sin(rho),
    H_pp = u_pp / sin(rho)^2 + cot(rho) u_r.
    """
    U = _require_ghosts(grid, field)
    u_r, u_rr, u_p, u_pp, u_rp = _partials(grid, U)
    if grid.dim_n == 1:
        return u_rr[..., None, None]
    s = np.sin(grid.rho)[:, None]
    cot = np.cos(grid.rho)[:, None] / s
    H = np.empty(grid.shape + (2, 2))
    H[..., 0, 0] = u_rr
    off = (u_rp - cot * u_p) / s
    H[..., 0, 1] = off
    H[..., 1, 0] = off
    H[..., 1, 1] = u_pp / s**2 + cot * u_r
    return H


def covariant_derivative(grid: CapGrid, T: np.ndarray) -> np.ndarray:
    """Covariant derivative of a frame tensor field of any rank.

    ``T`` has shape ``(n_rho, n_phi) + (n,)*r``; the result has one more
    trailing index, the differentiation direction last (``T_{i..j;k}``).
    The outermost ring has no ghost data and is returned as NaN.  Used for
    third- and fourth-derivative self-checks, not in the flow.
    """
    rank = T.ndim - 2
    n = grid.dim_n
    out = np.full(T.shape + (n,), np.nan)
    dr = grid.d_rho
    if n == 1:
        out[1:-1, ..., 0] = (T[2:] - T[:-2]) / (2 * dr)
        return out
    # pole mirror: frame vectors flip sign through the pole
    inner = np.roll(T[0], grid.n_phi // 2, axis=0) * (-1) ** rank
    P = np.concatenate([inner[None], T], axis=0)
    d_r = (P[2:] - P[:-2]) / (2 * dr)  # rings 0 .. n_rho-2
    out[:-1, ..., 0] = d_r
    s = np.sin(grid.rho)[:, None]
    cot = np.cos(grid.rho)[:, None] / s
    ik, _ = _wavenumbers(grid.n_phi)
    ik = ik.reshape((-1,) + (1,) * rank)
    d_p = np.fft.irfft(np.fft.rfft(T, axis=1) * ik, n=grid.n_phi, axis=1)
    d_p = d_p / s.reshape(s.shape + (1,) * rank)
    # connection: nabla_{e_phi} e_rho = cot e_phi, nabla_{e_phi} e_phi = -cot e_rho
    conn = np.zeros_like(T)
    for slot in range(rank):
        Tm = np.moveaxis(T, 2 + slot, -1)
        corr = np.empty_like(Tm)
        corr[..., 0] = Tm[..., 1]
        corr[..., 1] = -Tm[..., 0]
        conn = conn + np.moveaxis(corr, -1, 2 + slot)
    c = cot.reshape(cot.shape + (1,) * rank)
    out[:-1, ..., 1] = (d_p - c * conn)[:-1]
    return out


def integrate(grid: CapGrid, field: np.ndarray) -> float:
    """Quadrature of a nodal field over C_theta."""
    return float(np.sum(grid.weights * field))


def boundary_values(grid: CapGrid, field: Ghosted) -> np.ndarray:
    """Field interpolated to the boundary with the cubic closure stencil.

    Shape (n_phi,) for n = 2; (2,) ordered (alpha=-theta, alpha=theta) for n = 1.
    """
    U = _require_ghosts(grid, field)
    hi = _V4[0] * U[-1] + _V4[1] * U[-2] + _V4[2] * U[-3] + _V4[3] * U[-4]
    if grid.dim_n == 1:
        lo = _V4[0] * U[0] + _V4[1] * U[1] + _V4[2] * U[2] + _V4[3] * U[3]
        return np.array([lo[0], hi[0]])
    return hi


def robin_defect(grid: CapGrid, field: np.ndarray, coeff: float) -> float:
    """Max |d_mu u - coeff u| at the boundary using interior nodes only.

    Independent of any ghost fill, so it measures how well the field itself
    satisfies the Robin condition (O(dr^2) for consistent smooth data).
    """
    u = np.asarray(field, dtype=float)
    dr = grid.d_rho
    ends = [u[[-1, -2, -3]]]
    if grid.dim_n == 1:
        ends.append(u[[0, 1, 2]])
    worst = 0.0
    for e in ends:
        d = np.tensordot(_D3, e, axes=1) / dr
        v = np.tensordot(_V3, e, axes=1)
        worst = max(worst, float(np.max(np.abs(d - coeff * v))))
    return worst


def polar_filter(grid: CapGrid, field: np.ndarray) -> np.ndarray:
    """Drop azimuthal modes that the shrinking rings near the pole cannot resolve.

    Ring j keeps modes ``m <= max(2, pi sin(rho_j) / d_rho)``, which bounds the
    azimuthal stiffness by the radial one.  Identity for n = 1 and for
    axisymmetric fields.
    """
    if grid.dim_n == 1:
        return field
    mask = _filter_mask(grid)
    F = np.fft.rfft(field, axis=1)
    F *= mask
    return np.fft.irfft(F, n=grid.n_phi, axis=1)


_MASKS: dict[tuple, np.ndarray] = {}


def _filter_mask(grid: CapGrid) -> np.ndarray:
    key = (grid.theta, grid.n_rho, grid.n_phi)
    mask = _MASKS.get(key)
    if mask is None:
        m = np.arange(grid.n_phi // 2 + 1)
        cap = np.maximum(2.0, np.pi * np.sin(grid.rho) / grid.d_rho)
        mask = (m[None, :] <= cap[:, None]).astype(float)
        _MASKS[key] = mask
    return mask
