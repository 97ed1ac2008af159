"""Proper orthogonal decomposition by the method of snapshots.

Modes are orthonormal in the weighted inner product ``(u, v) = sum w u v``
(cell volumes for cell fields, unit weights for face fluxes).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .fom import SnapshotMatrix
from .grid import StructuredGrid

__all__ = [
    "PodBasis",
    "PodError",
    "compute_pod",
    "numerical_rank",
    "project",
    "projection_error_series",
    "projection_errors",
    "reconstruct",
    "write_eigen_csv",
]

RANK_TOL = 1e-12


class PodError(ValueError):
    """Raised for degenerate snapshot sets or size mismatches."""


@dataclass(frozen=True, eq=False)
class PodBasis:
    """POD modes (columns) with the full eigenvalue spectrum of the correlation matrix."""

    modes: np.ndarray
    eigenvalues: np.ndarray
    weights: np.ndarray
    role: str = "concentration"
    n_requested: int | None = None

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def size(self) -> int:
        return self.modes.shape[0]

    @property
    def normalized(self) -> np.ndarray:
        """Eigenvalues relative to the leading one."""
        return self.eigenvalues / self.eigenvalues[0]

    @property
    def retained_energy(self) -> np.ndarray:
        """Cumulative eigenvalue fraction ``E_n`` for n = 1..N_s."""
        lam = np.clip(self.eigenvalues, 0.0, None)
        return np.cumsum(lam) / lam.sum()

    def truncate(self, n: int) -> "PodBasis":
        if not 0 <= n <= self.n_modes:
            raise PodError(f"cannot truncate {self.n_modes} modes to {n}")
        return PodBasis(self.modes[:, :n], self.eigenvalues, self.weights, self.role, n)


def _as_array(snapshots) -> np.ndarray:
    if isinstance(snapshots, SnapshotMatrix):
        return snapshots.values
    arr = np.asarray(snapshots, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def _weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    if isinstance(weights, StructuredGrid):
        weights = weights.volumes
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise PodError(f"weights must have length {n}, got {w.shape}")
    return w


def compute_pod(
    snapshots,
    weights=None,
    n_modes: int | None = None,
    *,
    role: str | None = None,
    rank_tol: float = RANK_TOL,
) -> PodBasis:
    """POD basis from the snapshot correlation matrix ``C_ij = (s_i, s_j)``.

    Parameters
    ----------
    snapshots : SnapshotMatrix or (N, N_s) array
    weights : StructuredGrid, array or None
        Inner-product weights; a grid means cell volumes, None unit weights.
    n_modes : int, optional
        Number of modes to keep (default: numerical rank).  Modes whose
        eigenvalue falls below ``rank_tol * lambda_1`` are never kept.
    """
    S = _as_array(snapshots)
    if S.size == 0:
        raise PodError("empty snapshot set")
    n, ns = S.shape
    w = _weights(weights, n)
    if n_modes is not None and n_modes > ns:
        raise PodError(f"requested {n_modes} modes from {ns} snapshots")
    if role is None:
        role = snapshots.role if isinstance(snapshots, SnapshotMatrix) else "field"

    WS = w[:, None] * S
    C = S.T @ WS
    C = 0.5 * (C + C.T)
    lam, Q = la.eigh(C)
    lam, Q = lam[::-1], Q[:, ::-1]
    if not lam[0] > 0.0:
        raise PodError("all snapshots are zero")
    rank = int(np.count_nonzero(lam > rank_tol * lam[0]))
    keep = rank if n_modes is None else min(n_modes, rank)

    modes = S @ (Q[:, :keep] / np.sqrt(lam[:keep]))
    # one weighted QR pass restores orthonormality lost in small-eigenvalue modes
    sw = np.sqrt(w)
    if keep:
        q, r = np.linalg.qr(sw[:, None] * modes)
        modes = q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r))) / sw[:, None]
        # sign convention: first clearly nonzero entry positive
        amax = np.abs(modes).max(axis=0)
        first = np.argmax(np.abs(modes) > 1e-8 * amax, axis=0)
        signs = np.sign(modes[first, np.arange(keep)])
        modes = modes * np.where(signs == 0, 1.0, signs)
    return PodBasis(np.ascontiguousarray(modes), lam, w, role, n_modes)


def project(basis: PodBasis, field, n: int | None = None) -> np.ndarray:
    """Coefficients ``a_k = (field, phi_k)``; accepts one field or columns."""
    x = np.asarray(field, dtype=float)
    if x.shape[0] != basis.size:
        raise PodError(f"field length {x.shape[0]} does not match basis size {basis.size}")
    V = basis.modes if n is None else basis.modes[:, :n]
    wx = basis.weights * x if x.ndim == 1 else basis.weights[:, None] * x
    return V.T @ wx


def reconstruct(basis: PodBasis, a) -> np.ndarray:
    """Field ``sum_k a_k phi_k`` from the leading ``len(a)`` modes."""
    a = np.asarray(a, dtype=float)
    k = a.shape[0]
    if k > basis.n_modes:
        raise PodError(f"{k} coefficients for a basis of {basis.n_modes} modes")
    return basis.modes[:, :k] @ a


def _wnorm(w, X):
    return np.sqrt(np.einsum("i,ij->j", w, X * X))


def projection_errors(basis: PodBasis, test, n: int) -> tuple[np.ndarray, int]:
    """Relative weighted-L2 projection error per nonzero test column.

    Returns the errors and the number of all-zero columns skipped.
    """
    if not 0 <= n <= basis.n_modes:
        raise PodError(f"n = {n} outside [0, {basis.n_modes}]")
    X = _as_array(test)
    norms = _wnorm(basis.weights, X)
    nz = norms > 0.0
    if not np.any(nz):
        raise PodError("all test columns are zero")
    X = X[:, nz]
    if n == 0:
        return np.ones(X.shape[1]), int((~nz).sum())
    V = basis.modes[:, :n]
    R = X - V @ (V.T @ (basis.weights[:, None] * X))
    return _wnorm(basis.weights, R) / norms[nz], int((~nz).sum())


def projection_error_series(basis: PodBasis, test, n: int) -> float:
    """Mean over test columns of ``||c - P_n c|| / ||c||``."""
    err, _ = projection_errors(basis, test, n)
    return float(err.mean())


def numerical_rank(X, rel_tol: float = 1e-10) -> int:
    """Number of singular values above ``rel_tol * sigma_max``."""
    s = np.linalg.svd(np.asarray(X, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def write_eigen_csv(basis: PodBasis, path) -> None:
    """Columns: index, eigenvalue, normalized eigenvalue, retained energy."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "lambda", "sigma_hat", "retained_energy"])
        for i, (lam, s, e) in enumerate(
            zip(basis.eigenvalues, basis.normalized, basis.retained_energy), start=1
        ):
            w.writerow([i, repr(float(lam)), repr(float(s)), repr(float(e))])
