"""Full-order finite-volume transport: operators, implicit Euler, snapshots.

The semi-discrete system is ``M dc/dt + A c + C(phi) c + r = M f`` with
``M`` the cell volumes, ``A`` the two-point diffusion operator (Fick flux
``-nu grad c``), ``C`` first-order upwind convection assembled from face
fluxes and ``r`` the inflow closure (zero for clean inflow air).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .emission import EmissionSeries, evaluate_source
from .flow import FluxField, divergence
from .grid import StructuredGrid

__all__ = [
    "DEFAULT_NU",
    "SCHEME",
    "FomError",
    "SnapshotMatrix",
    "TransportOperators",
    "assemble_convection",
    "assemble_convection_split",
    "assemble_diffusion",
    "convection_closure",
    "run_fom",
    "split_flux",
    "step",
]

DEFAULT_NU = 1.5e-5
SCHEME = "upwind1"


class FomError(RuntimeError):
    """Raised when a full-order solve fails."""


@dataclass(frozen=True, eq=False)
class SnapshotMatrix:
    """Full-order fields (one column per instant) with their times in s."""

    values: np.ndarray
    times: np.ndarray
    role: str = "concentration"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        t = np.asarray(self.times, dtype=float).ravel()
        if v.shape[1] != t.size:
            raise ValueError(f"{v.shape[1]} columns but {t.size} instants")
        if not np.all(np.isfinite(v)):
            raise ValueError("snapshot matrix contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "times", t)

    @property
    def n_snapshots(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.n_snapshots

    @staticmethod
    def concatenate(mats, role=None) -> "SnapshotMatrix":
        mats = list(mats)
        return SnapshotMatrix(
            np.hstack([m.values for m in mats]),
            np.concatenate([m.times for m in mats]),
            role or mats[0].role,
        )


@dataclass(frozen=True, eq=False)
class TransportOperators:
    """Assembled FOM operators for one flux field."""

    mass: np.ndarray
    diffusion: sp.csr_matrix
    convection: sp.csr_matrix
    closure: np.ndarray
    scheme: str = SCHEME

    def system(self, dt: float) -> sp.csc_matrix:
        return (
            sp.diags(self.mass / dt) + self.diffusion + self.convection
        ).tocsc()


def split_flux(phi) -> tuple[np.ndarray, np.ndarray]:
    """Upwind split ``(max(phi, 0), min(phi, 0))`` of a face-flux vector."""
    v = phi.values if isinstance(phi, FluxField) else np.asarray(phi, dtype=float)
    return np.maximum(v, 0.0), np.minimum(v, 0.0)


def assemble_diffusion(g: StructuredGrid, nu: float = DEFAULT_NU, dirichlet=None) -> sp.csr_matrix:
    """Two-point diffusion operator with face coefficient ``nu S_f / delta``.

    Walls, obstacles and outer faces carry zero diffusive flux, except outer
    faces flagged in the boolean mask ``dirichlet`` which hold ``c = 0`` at
    the face (half-cell distance).
    """
    if nu <= 0:
        raise ValueError("diffusivity must be positive")
    k = nu * g.face_area * g.depth / g.face_delta
    o, n = g.owner, g.neighbour
    diag = np.bincount(o, weights=k, minlength=g.n_cells)
    diag += np.bincount(n, weights=k, minlength=g.n_cells)
    if dirichlet is not None:
        mask = np.asarray(dirichlet, dtype=bool)
        if mask.shape != (g.n_boundary,):
            raise ValueError("dirichlet mask must have one entry per boundary face")
        half = np.where(g.boundary_tag < 2, g.dx, g.dy) / 2.0
        kb = nu * g.boundary_area * g.depth / half
        diag += np.bincount(g.boundary_cell[mask], weights=kb[mask], minlength=g.n_cells)
    rows = np.concatenate([np.arange(g.n_cells), o, n])
    cols = np.concatenate([np.arange(g.n_cells), n, o])
    vals = np.concatenate([diag, -k, -k])
    return sp.csr_matrix((vals, (rows, cols)), shape=(g.n_cells, g.n_cells))


class _ConvectionPattern:
    """Fixed CSR sparsity of the convection operator on one grid."""

    def __init__(self, g: StructuredGrid):
        o, n, pb = g.owner, g.neighbour, g.boundary_cell
        rows = np.concatenate([o, o, n, n, pb])
        cols = np.concatenate([o, n, o, n, pb])
        probe = sp.csr_matrix(
            (np.arange(1, rows.size + 1, dtype=float), (rows, cols)),
            shape=(g.n_cells, g.n_cells),
        )
        probe.sum_duplicates()
        self.indptr = probe.indptr
        self.indices = probe.indices
        # map each COO entry to its CSR slot
        key_csr = np.repeat(np.arange(g.n_cells), np.diff(probe.indptr)) * g.n_cells + probe.indices
        key_coo = rows * g.n_cells + cols
        self.slot = np.searchsorted(key_csr, key_coo)
        self.nnz = probe.indices.size
        self.shape = (g.n_cells, g.n_cells)
        self.n_interior = g.n_interior

    def build(self, a: np.ndarray, b: np.ndarray) -> sp.csr_matrix:
        ni = self.n_interior
        ai, bi, ab = a[:ni], b[:ni], a[ni:]
        data = np.bincount(
            self.slot, weights=np.concatenate([ai, bi, -ai, -bi, ab]), minlength=self.nnz
        )
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


def _pattern(g: StructuredGrid) -> _ConvectionPattern:
    pat = g._cache.get("convection_pattern")
    if pat is None:
        pat = g._cache["convection_pattern"] = _ConvectionPattern(g)
    return pat


def assemble_convection_split(g: StructuredGrid, a, b) -> sp.csr_matrix:
    """Convection operator linear in the face coefficient pair ``(a, b)``.

    Face ``f`` transports ``a_f c_owner + b_f c_neighbour`` from owner to
    neighbour (boundary faces: ``a_f c_cell`` outward; their ``b`` part only
    enters :func:`convection_closure`).  With ``(a, b) = split_flux(phi)``
    this is first-order upwind.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (g.n_faces,) or b.shape != (g.n_faces,):
        raise ValueError(f"face vectors must have length {g.n_faces}")
    return _pattern(g).build(a, b)


def assemble_convection(g: StructuredGrid, phi: FluxField, *, check: bool = True) -> sp.csr_matrix:
    """First-order upwind convection operator for face flux ``phi``."""
    values = phi.values if isinstance(phi, FluxField) else np.asarray(phi, dtype=float)
    if check:
        scale = np.abs(values).max(initial=0.0)
        if scale > 0.0:
            div = np.abs(divergence(g, values)).max()
            if div > 1e-8 * scale:
                warnings.warn(
                    f"flux field is not divergence free (max |div| = {div:.3e})",
                    RuntimeWarning,
                    stacklevel=2,
                )
    a, b = split_flux(values)
    return assemble_convection_split(g, a, b)


def convection_closure(g: StructuredGrid, phi, inlet: float = 0.0, *, b=None) -> np.ndarray:
    """Constant vector from inflow faces carrying concentration ``inlet``."""
    if b is None:
        _, b = split_flux(phi)
    bb = np.asarray(b)[g.n_interior :]
    return np.bincount(g.boundary_cell, weights=bb * inlet, minlength=g.n_cells)


def operators(g: StructuredGrid, phi: FluxField, nu: float = DEFAULT_NU, inlet: float = 0.0,
              diffusion=None) -> TransportOperators:
    return TransportOperators(
        mass=g.volumes,
        diffusion=assemble_diffusion(g, nu) if diffusion is None else diffusion,
        convection=assemble_convection(g, phi),
        closure=convection_closure(g, phi, inlet),
    )


def _solve(K, rhs, rtol=1e-10, lu=None):
    x = lu.solve(rhs) if lu is not None else spla.spsolve(K, rhs)
    if not np.all(np.isfinite(x)):
        raise FomError("linear solve produced non-finite values")
    rnorm = np.linalg.norm(rhs)
    if rnorm > 0.0:
        res = np.linalg.norm(K @ x - rhs) / rnorm
        if res > rtol:
            raise FomError(f"linear solve residual {res:.3e} above {rtol:.1e}")
    return x


def _krylov_solve(K, rhs, lu, x0, rtol=1e-10):
    rnorm = np.linalg.norm(rhs)
    if rnorm == 0.0:
        return np.zeros_like(rhs)
    prec = spla.LinearOperator(K.shape, lu.solve)
    x, info = spla.bicgstab(K, rhs, x0=x0, rtol=1e-12, atol=0.0, M=prec, maxiter=200)
    if info != 0 or not np.all(np.isfinite(x)):
        return None
    if np.linalg.norm(K @ x - rhs) > rtol * rnorm:
        return None
    return x


def step(ops: TransportOperators, c, f, dt: float) -> np.ndarray:
    """One implicit Euler step ``(M/dt + A + C) c' = M/dt c + M f - r``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    c = np.asarray(c, dtype=float)
    f = np.asarray(f, dtype=float)
    rhs = ops.mass / dt * c + ops.mass * f - ops.closure
    return _solve(ops.system(dt), rhs)


def _n_steps(T: float, dt: float, name="T") -> int:
    n = int(round(T / dt))
    if n < 0 or not np.isclose(n * dt, T, rtol=0.0, atol=1e-9 * max(1.0, T)):
        raise ValueError(f"{name} = {T} is not a multiple of dt = {dt}")
    return n


def run_fom(
    g: StructuredGrid,
    phi: FluxField | Callable[[float], FluxField],
    series: EmissionSeries,
    T: float,
    dt: float,
    record_every: float | None = None,
    *,
    nu: float = DEFAULT_NU,
    inlet: float = 0.0,
    t_offset: float = 0.0,
    c0=None,
    refactor_every: int = 12,
) -> tuple[SnapshotMatrix, float]:
    """March the FOM from ``c0`` (zero by default) over ``[0, T]``.

    ``phi`` is either a fixed flux field (operator factorised once) or a
    callable ``t -> FluxField`` evaluated at each step's end time.  The
    source is evaluated at ``t_offset + t``.  With a time-dependent flux the
    step systems are solved by BiCGSTAB preconditioned with an LU factor
    refreshed every ``refactor_every`` steps.  Returns the recorded
    snapshots (local times) and the wall-clock seconds spent marching.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    record_every = dt if record_every is None else record_every
    n_steps = _n_steps(T, dt)
    stride = _n_steps(record_every, dt, "record_every")
    if stride < 1:
        raise ValueError("record_every must be a positive multiple of dt")

    start = time.perf_counter()
    M = g.volumes
    A = assemble_diffusion(g, nu)
    c = np.zeros(g.n_cells) if c0 is None else np.array(c0, dtype=float)
    cols, times = [c.copy()], [0.0]
    fixed = isinstance(phi, FluxField)
    if fixed:
        ops = TransportOperators(M, A, assemble_convection(g, phi), convection_closure(g, phi, inlet))
        K = ops.system(dt)
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
        closure = ops.closure
    mdt = M / dt
    precond = None
    for n in range(1, n_steps + 1):
        t = n * dt
        f = evaluate_source(series, g, t_offset + t)
        if not fixed:
            phi_t = phi(t)
            a, b = split_flux(phi_t)
            C = assemble_convection_split(g, a, b)
            closure = convection_closure(g, None, inlet, b=b)
            K = (sp.diags(mdt) + A + C).tocsc()
            rhs = mdt * c + M * f - closure
            if precond is None or (n - 1) % refactor_every == 0:
                precond = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
            c = _krylov_solve(K, rhs, precond, c)
            if c is None:
                precond = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
                c = _solve(K, rhs, lu=precond)
        else:
            c = _solve(K, mdt * c + M * f - closure, lu=lu)
        if n % stride == 0:
            cols.append(c.copy())
            times.append(t)
    elapsed = time.perf_counter() - start
    return SnapshotMatrix(np.column_stack(cols), np.array(times)), elapsed
