"""Parametric divergence-free face fluxes from a discrete potential flow.

The convective field only enters the transport model through face fluxes,
so a cell-centred potential with two-point face gradients is enough to
produce an exactly conservative wind family.  Far-field wind enters as
Neumann data ``u_ref . n S_f`` on the outer rectangle; obstacle faces are
impermeable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import StructuredGrid

__all__ = [
    "FlowError",
    "FluxField",
    "WindParameter",
    "abl_profile",
    "divergence",
    "pcg",
    "potential_laplacian",
    "solve_potential_flow",
    "unit_wind_fluxes",
]

TWO_PI = 2.0 * math.pi


class FlowError(RuntimeError):
    """Raised when a potential-flow solve cannot be carried out."""


@dataclass(frozen=True)
class WindParameter:
    """Reference wind: magnitude ``mu1`` (m/s) and incidence ``mu2`` (rad)."""

    mu1: float
    mu2: float

    def __post_init__(self):
        if not (self.mu1 >= 0.0 and math.isfinite(self.mu1)):
            raise ValueError(f"wind magnitude must be finite and >= 0, got {self.mu1}")
        object.__setattr__(self, "mu2", float(self.mu2) % TWO_PI)

    @property
    def velocity(self) -> np.ndarray:
        """Reference velocity ``(mu1 cos mu2, mu1 sin mu2)``."""
        return np.array([self.mu1 * math.cos(self.mu2), self.mu1 * math.sin(self.mu2)])

    @classmethod
    def from_velocity(cls, ux: float, uy: float) -> "WindParameter":
        return cls(math.hypot(ux, uy), math.atan2(uy, ux))


@dataclass(frozen=True)
class FluxField:
    """Normal volumetric flux (m^3/s) on interior then outer boundary faces.

    Interior fluxes are signed owner -> neighbour; boundary fluxes are
    signed outward.
    """

    values: np.ndarray
    n_interior: int

    @property
    def interior(self) -> np.ndarray:
        return self.values[: self.n_interior]

    @property
    def boundary(self) -> np.ndarray:
        return self.values[self.n_interior :]

    def __add__(self, other: "FluxField") -> "FluxField":
        return FluxField(self.values + other.values, self.n_interior)

    def __mul__(self, alpha: float) -> "FluxField":
        return FluxField(alpha * self.values, self.n_interior)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, g: StructuredGrid) -> "FluxField":
        return cls(np.zeros(g.n_faces), g.n_interior)


def abl_profile(z, u_ref: float, z_ref: float = 10.0, d: float = 0.0, z0: float = 0.1):
    """Neutral atmospheric-boundary-layer log-law wind speed at height ``z``.

    ``u_ref * ln((z - d + z0) / z0) / ln((z_ref + z0) / z0)``; defaults are
    ``z_ref = 10 m``, ``d = 0`` and ``z0 = 0.1 m``.
    """
    z = np.asarray(z, dtype=float)
    if z0 <= 0.0:
        raise ValueError("roughness length z0 must be positive")
    if z_ref + z0 <= 0.0:
        raise ValueError("z_ref + z0 must be positive")
    arg = (z - d + z0) / z0
    if np.any(arg <= 0.0):
        raise ValueError("log-law undefined where z - d + z0 <= 0")
    out = u_ref * np.log(arg) / math.log((z_ref + z0) / z0)
    return float(out) if out.ndim == 0 else out


def potential_laplacian(g: StructuredGrid) -> sp.csr_matrix:
    """Two-point flux Laplacian with transmissibilities ``S_f / delta``."""
    cached = g._cache.get("potential_laplacian")
    if cached is not None:
        return cached
    k = g.face_area * g.depth / g.face_delta
    o, n = g.owner, g.neighbour
    rows = np.concatenate([o, n, o, n])
    cols = np.concatenate([o, n, n, o])
    vals = np.concatenate([k, k, -k, -k])
    lap = sp.csr_matrix((vals, (rows, cols)), shape=(g.n_cells, g.n_cells))
    g._cache["potential_laplacian"] = lap
    return lap


def pcg(A, b, *, rtol: float = 1e-12, maxiter: int | None = None, x0=None):
    """Jacobi-preconditioned conjugate gradients for SPD ``A``.

    Returns ``(x, iterations, relative_residual)``; raises :class:`FlowError`
    when the tolerance is not met within ``maxiter`` iterations.
    """
    n = b.size
    maxiter = 10 * n if maxiter is None else maxiter
    inv_diag = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= rtol:
            return x, it, res
        z = inv_diag * r
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
    raise FlowError(f"PCG did not converge in {maxiter} iterations (residual {res:.3e})")


def solve_potential_flow(
    g: StructuredGrid, w: WindParameter, *, rtol: float = 1e-12
) -> FluxField:
    """Face fluxes of the potential flow driven by a uniform far-field wind."""
    return _flux_for_velocity(g, w.velocity, rtol)


def _flux_for_velocity(g: StructuredGrid, u, rtol: float) -> FluxField:
    bflux = (g.boundary_normal @ u) * g.boundary_area * g.depth
    phi = FluxField(np.concatenate([np.zeros(g.n_interior), bflux]), g.n_interior)
    if not np.any(bflux):
        return phi
    scale = np.abs(bflux).sum()
    if abs(bflux.sum()) > 1e-10 * scale:
        raise FlowError("boundary fluxes do not sum to zero")
    rhs = -np.bincount(g.boundary_cell, weights=bflux, minlength=g.n_cells)
    lap = potential_laplacian(g)
    # potential pinned to zero in cell 0
    if g.n_cells > 1:
        p = np.zeros(g.n_cells)
        p[1:], _, _ = pcg(lap[1:, 1:].tocsr(), rhs[1:], rtol=rtol)
    else:
        p = np.zeros(1)
    k = g.face_area * g.depth / g.face_delta
    phi.values[: g.n_interior] = k * (p[g.owner] - p[g.neighbour])
    return phi


def unit_wind_fluxes(g: StructuredGrid, *, rtol: float = 1e-12) -> tuple[FluxField, FluxField]:
    """Fluxes for unit wind along +x and +y.

    The potential problem is linear in the far-field velocity, so any wind
    ``(ux, uy)`` has flux ``ux * phi_x + uy * phi_y``.
    """
    key = ("unit_wind_fluxes", rtol)
    if key not in g._cache:
        g._cache[key] = (
            _flux_for_velocity(g, np.array([1.0, 0.0]), rtol),
            _flux_for_velocity(g, np.array([0.0, 1.0]), rtol),
        )
    return g._cache[key]


def divergence(g: StructuredGrid, phi) -> np.ndarray:
    """Per-cell signed outgoing flux sum (m^3/s)."""
    values = phi.values if isinstance(phi, FluxField) else np.asarray(phi, dtype=float)
    if values.shape != (g.n_faces,):
        raise ValueError(f"flux vector must have length {g.n_faces}, got {values.shape}")
    fi = values[: g.n_interior]
    out = np.bincount(g.owner, weights=fi, minlength=g.n_cells)
    out -= np.bincount(g.neighbour, weights=fi, minlength=g.n_cells)
    out += np.bincount(g.boundary_cell, weights=values[g.n_interior :], minlength=g.n_cells)
    return out
