"""Discrete empirical interpolation of the source term.

Greedy magic-point selection on a POD basis ``U`` of source snapshots, the
interpolation operator ``U (P^T U)^-1`` and the reduced source map that
sends magic-point values straight to Galerkin coefficients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .grid import StructuredGrid
from .pod import PodBasis

__all__ = [
    "DeimError",
    "DeimModel",
    "approximate",
    "build_deim",
    "deim_coefficients",
    "deim_error_curve",
    "greedy_magic_points",
    "reduced_source",
    "write_magic_points",
]

MAX_CONDITION = 1e12


class DeimError(ValueError):
    """Raised when a DEIM model cannot be built or evaluated."""


@dataclass(frozen=True, eq=False)
class DeimModel:
    U: np.ndarray
    magic_points: np.ndarray
    PtU: np.ndarray
    interp: np.ndarray  # U (P^T U)^-1
    weights: np.ndarray
    condition: float
    F_r: np.ndarray | None = None  # L^T W U (P^T U)^-1

    @property
    def n_deim(self) -> int:
        return self.magic_points.size

    def __post_init__(self):
        object.__setattr__(self, "_lu", la.lu_factor(self.PtU))


def greedy_magic_points(U: np.ndarray, support=None) -> np.ndarray:
    """Original DEIM greedy: each point maximises the current interpolation residual."""
    U = np.asarray(U, dtype=float)
    n, m = U.shape
    allowed = np.zeros(n, dtype=bool)
    if support is None:
        allowed[:] = True
    else:
        allowed[np.asarray(support, dtype=np.int64)] = True
    q = np.empty(m, dtype=np.int64)
    r = U[:, 0]
    for l in range(m):
        if l > 0:
            c = np.linalg.solve(U[q[:l], :l], U[q[:l], l])
            r = U[:, l] - U[:, :l] @ c
        score = np.where(allowed, np.abs(r), -1.0)
        score[q[:l]] = -1.0
        q[l] = int(np.argmax(score))
        if score[q[l]] <= 0.0:
            raise DeimError(f"DEIM residual vanished at step {l + 1}; basis rank too small")
    return q


def build_deim(
    source_basis: PodBasis,
    conc_basis: PodBasis | None = None,
    n_deim: int | None = None,
    *,
    support=None,
) -> DeimModel:
    """DEIM model on the leading ``n_deim`` source modes.

    ``support`` restricts candidate points (e.g. to road cells); by default
    the rows where any retained source mode is nonzero.
    """
    n_deim = source_basis.n_modes if n_deim is None else n_deim
    if not 1 <= n_deim <= source_basis.n_modes:
        raise DeimError(
            f"N_DEIM = {n_deim} exceeds the {source_basis.n_modes} available source modes"
        )
    U = source_basis.modes[:, :n_deim]
    if support is None:
        support = np.nonzero(np.any(U != 0.0, axis=1))[0]
    q = greedy_magic_points(U, support)
    PtU = U[q]
    cond = float(np.linalg.cond(PtU))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DeimError(f"P^T U is numerically singular (condition {cond:.3e})")
    interp = la.solve(PtU.T, U.T).T
    w = source_basis.weights
    F_r = None
    if conc_basis is not None:
        if conc_basis.size != U.shape[0]:
            raise DeimError("source and concentration bases live on different grids")
        F_r = conc_basis.modes.T @ (w[:, None] * interp)
    return DeimModel(U, q, PtU, interp, w, cond, F_r)


def with_concentration_basis(model: DeimModel, conc_basis: PodBasis) -> DeimModel:
    F_r = conc_basis.modes.T @ (model.weights[:, None] * model.interp)
    return DeimModel(model.U, model.magic_points, model.PtU, model.interp, model.weights,
                     model.condition, F_r)


def _point_values(model: DeimModel, values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape[0] != model.n_deim:
        raise DeimError(f"expected {model.n_deim} magic-point values, got {v.shape[0]}")
    return v


def deim_coefficients(model: DeimModel, values) -> np.ndarray:
    """Coefficients ``p`` of ``U p`` solving ``(P^T U) p = f(q)``."""
    return la.lu_solve(model._lu, _point_values(model, values))


def approximate(model: DeimModel, values) -> np.ndarray:
    """Full-order DEIM reconstruction from magic-point values."""
    return model.interp @ _point_values(model, values)


def reduced_source(model: DeimModel, values) -> np.ndarray:
    """Galerkin source coefficients ``F_r f(q)`` (no full-order work)."""
    if model.F_r is None:
        raise DeimError("model was built without a concentration basis")
    return model.F_r @ _point_values(model, values)


def _mean_rel_error(w, F, approx):
    norms = np.sqrt(np.einsum("i,ij->j", w, F * F))
    nz = norms > 0.0
    R = F[:, nz] - approx[:, nz]
    return float(np.mean(np.sqrt(np.einsum("i,ij->j", w, R * R)) / norms[nz]))


def deim_error_curve(source_basis: PodBasis, sizes, train, test, *, support=None) -> list[tuple]:
    """Mean relative weighted-L2 DEIM error on train and test snapshot columns.

    Returns rows ``(n_deim, train_error, test_error)``.  The greedy points of
    a smaller model are a prefix of those of a larger one.
    """
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes:
        return []
    full = build_deim(source_basis, n_deim=max(sizes), support=support)
    train = getattr(train, "values", np.asarray(train, dtype=float))
    test = getattr(test, "values", np.asarray(test, dtype=float))
    if train.size == 0 or test.size == 0:
        raise DeimError("snapshot sets must be non-empty")
    w = source_basis.weights
    rows = []
    for m in sizes:
        U, q = full.U[:, :m], full.magic_points[:m]
        interp = la.solve(U[q].T, U.T).T
        rows.append((m, _mean_rel_error(w, train, interp @ train[q]),
                     _mean_rel_error(w, test, interp @ test[q])))
    return rows


def write_magic_points(model: DeimModel, g: StructuredGrid, path) -> None:
    c = g.centers
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["order", "cell", "x", "y"])
        for k, q in enumerate(model.magic_points, start=1):
            w.writerow([k, int(q), repr(float(c[q, 0])), repr(float(c[q, 1]))])
