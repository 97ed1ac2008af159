"""Galerkin reduced transport model.

The reduced system mirrors the FOM time scheme::

    (M_r/dt + B_r + C_r(pi)) a' = M_r/dt a + s_r(t') - inlet * Gc pi

with ``C_r(pi) = sum_k pi_k Gamma[:, :, k]``.  Upwinding is linear in the
split face pair ``(phi+, phi-)``, so flux modes live on the stacked vector
``[phi+; phi-]`` (see :func:`stack_flux`) and every ``Gamma`` slice is the
reduced split-convection operator of one such mode.  The contraction is
then exact for any flux in the span of the modes.

The source term ``s_r`` comes either from projecting the full source
(``"projection"``) or from DEIM magic-point values (``"deim"``).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as la

from .deim import DeimModel
from .emission import EmissionSeries, PointSource
from .fom import SCHEME, SnapshotMatrix, TransportOperators
from .flow import FluxField
from .grid import StructuredGrid
from .mlp import Mlp
from .pod import PodBasis
from .storage import read_matrix, write_matrix

__all__ = [
    "ReducedTrajectory",
    "RomError",
    "RomMetrics",
    "RomOperators",
    "assemble_gamma",
    "assemble_reduced",
    "build_rom",
    "contract_convection",
    "evaluate",
    "flux_coefficients",
    "load_rom",
    "nn_flux_schedule",
    "projected_flux_schedule",
    "run_rom",
    "save_rom",
    "stack_flux",
    "write_metrics",
]

SOURCE_PATHS = ("projection", "deim")
_SOURCE_BLOCK = 64


class RomError(RuntimeError):
    """Raised for inconsistent reduced operators or a failed reduced solve."""


def stack_flux(phi) -> np.ndarray:
    """Stacked upwind split ``[max(phi, 0); min(phi, 0)]`` (length 2 n_faces)."""
    v = phi.values if isinstance(phi, FluxField) else np.asarray(phi, dtype=float)
    return np.concatenate([np.maximum(v, 0.0), np.minimum(v, 0.0)], axis=0)


def _split_modes(Psi: np.ndarray, n_faces: int):
    if Psi.shape[0] != 2 * n_faces:
        raise RomError(f"flux modes must have length 2*{n_faces}, got {Psi.shape[0]}")
    return Psi[:n_faces], Psi[n_faces:]


def assemble_reduced(Phi: PodBasis, ops: TransportOperators, *, tol: float = 1e-10):
    """Reduced mass ``Phi^T M Phi`` and diffusion ``Phi^T A Phi``."""
    V = Phi.modes
    if V.shape[0] != ops.mass.size:
        raise RomError("basis and operators live on different grids")
    M_r = V.T @ (ops.mass[:, None] * V)
    B_r = V.T @ (ops.diffusion @ V)
    dev = np.abs(M_r - np.eye(V.shape[1])).max(initial=0.0)
    if dev > tol:
        raise RomError(f"reduced mass deviates from identity by {dev:.3e}")
    return M_r, B_r


def assemble_gamma(g: StructuredGrid, Psi, Phi, *, scheme: str = SCHEME):
    """Convective tensor and inflow closure columns.

    Returns ``Gamma`` with ``Gamma[:, :, k] = Phi^T C(Psi_k) Phi`` and
    ``Gc`` with ``Gc[:, k] = Phi^T r(Psi_k)`` for unit inlet concentration.
    """
    if scheme != SCHEME:
        raise RomError(f"face rule {scheme!r} does not match the FOM rule {SCHEME!r}")
    Psi = getattr(Psi, "modes", Psi)
    V = getattr(Phi, "modes", Phi)
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float).T).T
    if Psi.shape[1] == 0 or V.shape[1] == 0:
        raise RomError("empty basis")
    if V.shape[0] != g.n_cells:
        raise RomError("concentration modes do not match the grid")
    A, B = _split_modes(Psi, g.n_faces)
    ni = g.n_interior
    VO, VN, VB = V[g.owner], V[g.neighbour], V[g.boundary_cell]
    D = VO - VN
    n, m = V.shape[1], Psi.shape[1]
    # sum_f D[f, i] w[f, k] X[f, j] for each weighted term
    def term(L, w, R):
        LW = (L[:, :, None] * w[:, None, :]).reshape(L.shape[0], n * m)
        return (LW.T @ R).reshape(n, m, n).transpose(0, 2, 1)

    Gamma = term(D, A[:ni], VO) + term(D, B[:ni], VN) + term(VB, A[ni:], VB)
    Gc = VB.T @ B[ni:]
    return np.ascontiguousarray(Gamma), Gc


def contract_convection(Gamma: np.ndarray, pi) -> np.ndarray:
    """``C_r = sum_k pi_k Gamma[:, :, k]``; ``pi`` may also be (N_phi, n_t)."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape[0] != Gamma.shape[2]:
        raise RomError(f"expected {Gamma.shape[2]} flux coefficients, got {pi.shape[0]}")
    return Gamma @ pi if pi.ndim == 1 else np.einsum("ijk,kt->tij", Gamma, pi)


def flux_coefficients(Psi: PodBasis, phi) -> np.ndarray:
    """Exact coefficients of a flux field in the stacked flux basis."""
    x = stack_flux(phi)
    return Psi.modes.T @ (Psi.weights[:, None] * x if x.ndim == 2 else Psi.weights * x)


@dataclass(eq=False)
class RomOperators:
    Phi: PodBasis
    Psi: PodBasis
    M_r: np.ndarray
    B_r: np.ndarray
    Gamma: np.ndarray
    Gc: np.ndarray
    deim: DeimModel | None = None
    regressor: Mlp | None = None
    inlet: float = 0.0
    scheme: str = SCHEME
    meta: dict = field(default_factory=dict)

    @property
    def n_rb(self) -> int:
        return self.M_r.shape[0]

    @property
    def n_phi(self) -> int:
        return self.Gamma.shape[2]

    @property
    def n_deim(self) -> int:
        return 0 if self.deim is None else self.deim.n_deim

    @property
    def F_r(self):
        return None if self.deim is None else self.deim.F_r


def build_rom(g, Phi: PodBasis, Psi: PodBasis, ops: TransportOperators, deim=None,
              regressor=None, inlet: float = 0.0) -> RomOperators:
    M_r, B_r = assemble_reduced(Phi, ops)
    Gamma, Gc = assemble_gamma(g, Psi, Phi, scheme=ops.scheme)
    if deim is not None and (deim.F_r is None or deim.F_r.shape[0] != Phi.n_modes):
        raise RomError("DEIM model is not paired with this concentration basis")
    return RomOperators(Phi, Psi, M_r, B_r, Gamma, Gc, deim, regressor, inlet, ops.scheme)


def projected_flux_schedule(Psi: PodBasis, flux_of_t: Callable[[float], FluxField]):
    """Intrusive schedule: exact flux coefficients at each instant."""
    def schedule(times):
        cols = [stack_flux(flux_of_t(float(t))) for t in np.atleast_1d(times)]
        return Psi.modes.T @ (Psi.weights[:, None] * np.column_stack(cols))
    return schedule


def nn_flux_schedule(net: Mlp, wind_of_t: Callable, n_phi: int | None = None):
    """Regressed schedule; ``wind_of_t(times)`` returns encoded winds (n_t, 2)."""
    def schedule(times):
        y = net.predict(wind_of_t(np.atleast_1d(times)))
        return (y if n_phi is None else y[:, :n_phi]).T
    return schedule


@dataclass(frozen=True, eq=False)
class ReducedTrajectory:
    coefficients: np.ndarray  # (N_rb, n_instants)
    times: np.ndarray
    elapsed: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.coefficients)):
            raise RomError("non-finite reduced coefficients")
        if np.any(np.diff(self.times) <= 0):
            raise RomError("instants must be strictly increasing")


def _steps(T, dt):
    n = int(round(T / dt))
    if n < 0 or not np.isclose(n * dt, T, rtol=0.0, atol=1e-9 * max(1.0, T)):
        raise ValueError(f"T = {T} is not a multiple of dt = {dt}")
    return n


def run_rom(
    rom: RomOperators,
    flux,
    source,
    T: float,
    dt: float,
    *,
    source_path: str = "deim",
    record_every: float | None = None,
    t_offset: float = 0.0,
    a0=None,
) -> ReducedTrajectory:
    """Implicit Euler on the reduced system.

    Parameters
    ----------
    flux : array (N_phi,) or callable
        Constant flux coefficients (fixed operator, propagators built once)
        or a schedule ``times -> (N_phi, n_t)`` array.  Like the FOM, the
        schedule sees local times and the source ``t_offset + t``.
    source : PointSource or EmissionSeries
        The DEIM path accepts only a :class:`PointSource` on the magic points;
        the projection path needs the full :class:`EmissionSeries`.
    """
    if source_path not in SOURCE_PATHS:
        raise ValueError(f"source_path must be one of {SOURCE_PATHS}")
    n_steps = _steps(T, dt)
    stride = _steps(dt if record_every is None else record_every, dt)
    if stride < 1:
        raise ValueError("record_every must be a positive multiple of dt")
    n = rom.n_rb
    start = time.perf_counter()
    local = dt * np.arange(1, n_steps + 1)
    times = t_offset + local

    if source_path == "deim":
        if not isinstance(source, PointSource):
            raise RomError("the DEIM path takes magic-point values only (PointSource)")
        if rom.deim is None:
            raise RomError("no DEIM model attached")
        if not np.array_equal(source.cells, rom.deim.magic_points):
            raise RomError("point source cells differ from the magic points")
        S = rom.deim.F_r @ source.values_many(times)
    else:
        if not isinstance(source, EmissionSeries):
            raise RomError("the projection path needs the full emission series")
        # full-order field f_h projected onto the basis, in blocks of steps
        V, w = rom.Phi.modes[:, :n], rom.Phi.weights
        S = np.empty((n, n_steps))
        for k0 in range(0, n_steps, _SOURCE_BLOCK):
            tb = times[k0 : k0 + _SOURCE_BLOCK]
            F = np.zeros((w.size, tb.size))
            F[source.road_cells] = source.values_many(tb)
            S[:, k0 : k0 + tb.size] = V.T @ (w[:, None] * F)

    a = np.zeros(n) if a0 is None else np.array(a0, dtype=float)
    out, out_t = [a.copy()], [t_offset]
    Mdt = rom.M_r / dt
    if callable(flux):
        P = np.asarray(flux(local), dtype=float).reshape(rom.n_phi, n_steps)
        C = contract_convection(rom.Gamma, P)
        R = rom.inlet * (rom.Gc @ P)
        for k in range(n_steps):
            a = la.solve(Mdt + rom.B_r + C[k], Mdt @ a + S[:, k] - R[:, k],
                         check_finite=False)
            if (k + 1) % stride == 0:
                out.append(a)
                out_t.append(times[k])
    else:
        pi = np.asarray(flux, dtype=float)
        K = Mdt + rom.B_r + contract_convection(rom.Gamma, pi)
        lu = la.lu_factor(K)
        G = la.lu_solve(lu, Mdt)
        H = la.lu_solve(lu, np.eye(n))
        S = H @ (S - rom.inlet * (rom.Gc @ pi)[:, None])
        for k in range(n_steps):
            a = G @ a + S[:, k]
            if (k + 1) % stride == 0:
                out.append(a)
                out_t.append(times[k])
    elapsed = time.perf_counter() - start
    return ReducedTrajectory(np.column_stack(out), np.array(out_t), elapsed)


@dataclass
class RomMetrics:
    err_rb: float
    times: np.ndarray
    errors: np.ndarray
    worst_time: float
    worst_field: np.ndarray  # |c - c_rb| / max|c| at the worst instant
    n_skipped: int
    speedup: float | None = None


def evaluate(fom: SnapshotMatrix, traj: ReducedTrajectory, Phi: PodBasis,
             fom_seconds: float | None = None) -> RomMetrics:
    """Relative weighted-L2 ROM error per instant and its mean ``Err_rb``.

    Instants where the FOM field is zero are skipped (and counted).
    """
    if fom.times.shape != traj.times.shape or not np.allclose(fom.times, traj.times,
                                                               rtol=0, atol=1e-6):
        raise RomError("FOM and ROM instants do not match")
    w = Phi.weights
    C = fom.values
    R = C - Phi.modes[:, : traj.coefficients.shape[0]] @ traj.coefficients
    norms = np.sqrt(w @ (C * C))
    nz = norms > 0.0
    if not np.any(nz):
        raise RomError("all FOM instants are zero")
    errs = np.sqrt(w @ (R * R))[nz] / norms[nz]
    k = int(np.argmax(errs))
    col = np.nonzero(nz)[0][k]
    worst = np.abs(R[:, col]) / np.abs(C[:, col]).max()
    speedup = None
    if fom_seconds is not None and traj.elapsed > 0:
        speedup = fom_seconds / traj.elapsed
    return RomMetrics(float(errs.mean()), fom.times[nz], errs, float(fom.times[col]), worst,
                      int((~nz).sum()), speedup)


def write_metrics(m: RomMetrics, path) -> None:
    """Per-instant error series as CSV (time, relative error)."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "relative_error"])
        for t, e in zip(m.times, m.errors):
            w.writerow([repr(float(t)), repr(float(e))])


def save_rom(rom: RomOperators, directory) -> None:
    """Directory of matrix files plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, m = rom.n_rb, rom.n_phi
    write_matrix(d / "Phi.rmdm", rom.Phi.modes)
    write_matrix(d / "Phi_weights.rmdm", rom.Phi.weights)
    write_matrix(d / "Phi_eigenvalues.rmdm", rom.Phi.eigenvalues)
    write_matrix(d / "Psi.rmdm", rom.Psi.modes)
    write_matrix(d / "Psi_eigenvalues.rmdm", rom.Psi.eigenvalues)
    write_matrix(d / "M_r.rmdm", rom.M_r)
    write_matrix(d / "B_r.rmdm", rom.B_r)
    write_matrix(d / "Gamma.rmdm", rom.Gamma.reshape(n * n, m))
    write_matrix(d / "Gc.rmdm", rom.Gc)
    if rom.deim is not None:
        write_matrix(d / "deim_U.rmdm", rom.deim.U)
        write_matrix(d / "deim_points.rmdm", rom.deim.magic_points.astype(float))
        write_matrix(d / "F_r.rmdm", rom.deim.F_r)
    manifest = dict(n_rb=n, n_phi=m, n_deim=rom.n_deim, scheme=rom.scheme,
                    inlet=rom.inlet, mass_tol=1e-10, **rom.meta)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_rom(directory, *, online_only: bool = False) -> RomOperators:
    """Load a saved ROM.  ``online_only`` skips the full-order basis files."""
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    n, m = man["n_rb"], man["n_phi"]
    if online_only:
        Phi = PodBasis(np.zeros((0, n)), np.ones(1), np.zeros(0))
        Psi = PodBasis(np.zeros((0, m)), np.ones(1), np.zeros(0), "flux")
    else:
        Phi = PodBasis(read_matrix(d / "Phi.rmdm"), read_matrix(d / "Phi_eigenvalues.rmdm")[:, 0],
                       read_matrix(d / "Phi_weights.rmdm")[:, 0], "concentration")
        psi = read_matrix(d / "Psi.rmdm")
        Psi = PodBasis(psi, read_matrix(d / "Psi_eigenvalues.rmdm")[:, 0], np.ones(psi.shape[0]),
                       "flux")
    deim = None
    if man["n_deim"]:
        points = read_matrix(d / "deim_points.rmdm")[:, 0].astype(np.int64)
        F_r = read_matrix(d / "F_r.rmdm")
        if online_only:
            # online DEIM needs only the points and the reduced map
            eye = np.eye(points.size)
            deim = DeimModel(np.zeros((0, points.size)), points, eye, np.zeros((0, points.size)),
                             np.zeros(0), 1.0, F_r)
        else:
            U = read_matrix(d / "deim_U.rmdm")
            PtU = U[points]
            deim = DeimModel(U, points, PtU, la.solve(PtU.T, U.T).T, Phi.weights,
                             float(np.linalg.cond(PtU)), F_r)
    meta = {k: v for k, v in man.items()
            if k not in ("n_rb", "n_phi", "n_deim", "scheme", "inlet", "mass_tol")}
    return RomOperators(Phi, Psi, read_matrix(d / "M_r.rmdm"), read_matrix(d / "B_r.rmdm"),
                        read_matrix(d / "Gamma.rmdm").reshape(n, n, m), read_matrix(d / "Gc.rmdm"),
                        deim, None, float(man["inlet"]), man["scheme"], meta)
