"""Empirical road-emission series sampled every ``h`` seconds.

The source is known at knots ``t_k = k h`` and linearly interpolated in
between.  Days are stored back to back and share their boundary knot, so a
series of ``D`` days with ``K`` intervals per day has ``D K + 1`` columns.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import StructuredGrid

__all__ = [
    "EmissionError",
    "EmissionSeries",
    "PointSource",
    "ProfileConfig",
    "diurnal_profile",
    "evaluate_source",
    "read_point_source",
    "read_series",
    "segment_labels",
    "synthesize_series",
    "write_series",
]


class EmissionError(ValueError):
    """Raised for invalid emission data or evaluation times."""


@dataclass(frozen=True)
class ProfileConfig:
    """Shape of the synthetic traffic emission generator.

    ``noise`` bounds the relative perturbation.  A share
    ``segment_share`` of it is common to all cells of one road segment of
    length ``segment_length`` (m); the rest is independent per cell.
    """

    h: float = 300.0
    day_length: float = 86400.0
    rate: float = 1.0e-6  # kg/(m^3 s) at the profile peak
    night_level: float = 0.15
    peaks: tuple = ((8.0, 1.0, 1.5), (18.0, 0.85, 2.0))  # (hour, height, width h)
    day_factor: tuple = (0.6, 1.0)
    weight_range: tuple = (0.5, 1.5)
    noise: float = 0.2
    segment_length: float = 200.0
    segment_share: float = 0.9

    def validate(self) -> None:
        if self.h <= 0 or self.day_length <= 0:
            raise EmissionError("h and day_length must be positive")
        lo, hi = self.day_factor
        if not 0.0 <= lo <= hi:
            raise EmissionError("day_factor must satisfy 0 <= lo <= hi")
        if not 0.0 <= self.noise < 1.0:
            raise EmissionError("noise amplitude must be in [0, 1)")
        if not 0.0 <= self.segment_share <= 1.0:
            raise EmissionError("segment_share must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class EmissionSeries:
    """Knot values per road cell; rows follow ``road_cells``."""

    h: float
    samples: np.ndarray  # (n_road, n_knots), kg/(m^3 s)
    road_cells: np.ndarray
    days: int = 1
    seed: int | None = None
    day_length: float = 86400.0
    _row_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[0] != len(self.road_cells):
            raise EmissionError("samples must be (n_road_cells, n_knots)")
        if s.shape[1] < 2:
            raise EmissionError("a series needs at least two knots")
        if self.h <= 0:
            raise EmissionError("h must be positive")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise EmissionError("emission samples must be finite and non-negative")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "road_cells", np.asarray(self.road_cells, dtype=np.int64))

    @property
    def n_knots(self) -> int:
        return self.samples.shape[1]

    @property
    def horizon(self) -> float:
        return (self.n_knots - 1) * self.h

    @property
    def knot_times(self) -> np.ndarray:
        return np.arange(self.n_knots) * self.h

    def rows_for_cells(self, cells) -> np.ndarray:
        """Row index of each given cell; raises if a cell carries no source."""
        if not self._row_of:
            self._row_of.update({int(c): r for r, c in enumerate(self.road_cells)})
        try:
            return np.array([self._row_of[int(c)] for c in cells], dtype=np.int64)
        except KeyError as exc:
            raise EmissionError(f"cell {exc} is not a source cell") from None

    def _bracket(self, t: float):
        if not (0.0 <= t <= self.horizon):
            raise EmissionError(f"t = {t} outside [0, {self.horizon}]")
        k = min(int(t // self.h), self.n_knots - 2)
        theta = (t - k * self.h) / self.h
        return k, theta

    def values(self, t: float, rows=None) -> np.ndarray:
        """Interpolated values at time ``t`` on all (or selected) rows."""
        k, theta = self._bracket(t)
        s = self.samples if rows is None else self.samples[rows]
        if theta == 0.0:
            return s[:, k].copy()
        return (1.0 - theta) * s[:, k] + theta * s[:, k + 1]

    def values_many(self, times, rows=None) -> np.ndarray:
        """Interpolated values at several instants, one column per instant."""
        s = self.samples if rows is None else self.samples[rows]
        return _interp_columns(s, self.h, self.horizon, times)

    def day(self, d: int) -> "EmissionSeries":
        """Sub-series covering day ``d`` (0-based)."""
        per_day = int(round(self.day_length / self.h))
        lo = d * per_day
        if d < 0 or lo + per_day >= self.n_knots:
            raise EmissionError(f"day {d} not covered by the series")
        return EmissionSeries(
            self.h, self.samples[:, lo : lo + per_day + 1], self.road_cells, 1,
            self.seed, self.day_length,
        )


class PointSource:
    """Source knots restricted to a few cells (e.g. DEIM magic points).

    Holds no full-order data; evaluation costs O(number of points).
    """

    def __init__(self, series: EmissionSeries, cells):
        rows = series.rows_for_cells(cells)
        self._set(cells, series.samples[rows], series.h)

    def _set(self, cells, samples, h):
        self.h = float(h)
        self.cells = np.asarray(cells, dtype=np.int64)
        self.samples = np.ascontiguousarray(samples, dtype=float)
        self.horizon = (self.samples.shape[1] - 1) * self.h
        self._last_k = self.samples.shape[1] - 2

    @classmethod
    def from_samples(cls, cells, samples, h: float) -> "PointSource":
        obj = cls.__new__(cls)
        obj._set(cells, samples, h)
        return obj

    def values(self, t: float) -> np.ndarray:
        if not (0.0 <= t <= self.horizon):
            raise EmissionError(f"t = {t} outside [0, {self.horizon}]")
        k = min(int(t // self.h), self._last_k)
        theta = (t - k * self.h) / self.h
        s = self.samples
        if theta == 0.0:
            return s[:, k].copy()
        return (1.0 - theta) * s[:, k] + theta * s[:, k + 1]

    def values_many(self, times) -> np.ndarray:
        return _interp_columns(self.samples, self.h, self.horizon, times)


def _interp_columns(s, h, horizon, times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.size and (t.min() < 0.0 or t.max() > horizon):
        raise EmissionError(f"instants outside [0, {horizon}]")
    k = np.minimum((t // h).astype(np.int64), s.shape[1] - 2)
    theta = (t - k * h) / h
    return s[:, k] * (1.0 - theta) + s[:, k + 1] * theta


def diurnal_profile(t, cfg: ProfileConfig = ProfileConfig()) -> np.ndarray:
    """Double-peak traffic profile in [night_level, ~1] (t in seconds)."""
    hours = (np.asarray(t, dtype=float) % cfg.day_length) / 3600.0
    out = np.full(hours.shape, cfg.night_level)
    for hour, height, width in cfg.peaks:
        # periodic distance on the 24 h clock
        dh = np.abs(hours - hour)
        dh = np.minimum(dh, 24.0 - dh)
        out = out + height * np.exp(-0.5 * (dh / width) ** 2)
    return out


def segment_labels(g: StructuredGrid, segment_length: float) -> np.ndarray:
    """Label road cells by road id and arc-length bin of ``segment_length``."""
    if g.road_cells.size == 0:
        return np.zeros(0, dtype=np.int64)
    bins = np.floor(g.road_arclength / segment_length).astype(np.int64)
    keys = np.stack([g.road_id, bins], axis=1)
    _, labels = np.unique(keys, axis=0, return_inverse=True)
    return labels.ravel().astype(np.int64)


def synthesize_series(
    seed: int,
    days: int,
    road_cells,
    cfg: ProfileConfig = ProfileConfig(),
    segments=None,
) -> EmissionSeries:
    """Synthetic traffic emissions on ``road_cells``.

    Each cell follows ``profile(t) * day_factor * weight * (1 + noise)``
    clipped at zero, with the day factor drawn in ``cfg.day_factor`` and a
    noise term bounded by ``cfg.noise``.

    Parameters
    ----------
    segments : array of int, optional
        Segment label per road cell; cells of one segment share the
        correlated part of the noise.  Defaults to one segment per cell.
    """
    cfg.validate()
    road_cells = np.asarray(road_cells, dtype=np.int64)
    n = road_cells.size
    if n == 0:
        raise EmissionError("emission requested on an empty road set")
    if days < 1:
        raise EmissionError("days must be >= 1")
    per_day = int(round(cfg.day_length / cfg.h))
    if not math.isclose(per_day * cfg.h, cfg.day_length):
        raise EmissionError("day_length must be a multiple of h")
    segments = np.arange(n) if segments is None else np.asarray(segments, dtype=np.int64)
    if segments.shape != (n,):
        raise EmissionError("one segment label per road cell is required")
    n_seg = int(segments.max()) + 1

    rng = np.random.default_rng(seed)
    n_knots = days * per_day + 1
    t = np.arange(n_knots) * cfg.h
    base = diurnal_profile(t, cfg)
    lo, hi = cfg.day_factor
    day_factor = rng.uniform(lo, hi, size=days)
    # a shared day-boundary knot takes the factor of the day it opens
    day_idx = np.minimum((t // cfg.day_length).astype(np.int64), days - 1)
    factor = day_factor[day_idx]
    weight = rng.uniform(*cfg.weight_range, size=n)
    seg_noise = rng.uniform(-1.0, 1.0, size=(n_seg, n_knots))
    cell_noise = rng.uniform(-1.0, 1.0, size=(n, n_knots))
    noise = cfg.noise * (
        cfg.segment_share * seg_noise[segments] + (1.0 - cfg.segment_share) * cell_noise
    )
    samples = cfg.rate * (base * factor)[None, :] * weight[:, None] * (1.0 + noise)
    np.clip(samples, 0.0, None, out=samples)
    return EmissionSeries(cfg.h, samples, road_cells, days, seed, cfg.day_length)


def evaluate_source(series: EmissionSeries, g: StructuredGrid, t: float) -> np.ndarray:
    """Full cell field of the source at time ``t`` (zero off the road cells)."""
    out = np.zeros(g.n_cells)
    out[series.road_cells] = series.values(t)
    return out


def write_series(series: EmissionSeries, path) -> None:
    """CSV with one row per road cell (cell index, then knot values) + JSON header."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell"] + [f"k{k}" for k in range(series.n_knots)])
        for cell, row in zip(series.road_cells, series.samples):
            w.writerow([int(cell)] + [repr(float(v)) for v in row])
    header = dict(h=series.h, days=series.days, seed=series.seed, day_length=series.day_length)
    path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")


def read_series(path) -> EmissionSeries:
    """Read a series written by :func:`write_series` (or produced externally)."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    cells, rows = [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for line in r:
            cells.append(int(line[0]))
            rows.append([float(v) for v in line[1:]])
    return EmissionSeries(
        float(header["h"]), np.array(rows), np.array(cells, dtype=np.int64),
        int(header.get("days", 1)), header.get("seed"),
        float(header.get("day_length", 86400.0)),
    )


def read_point_source(path, cells) -> PointSource:
    """Read only the rows of ``cells`` from a series CSV (order follows ``cells``)."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    want = {int(c): k for k, c in enumerate(cells)}
    rows = [None] * len(want)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for line in r:
            k = want.get(int(line[0]))
            if k is not None:
                rows[k] = [float(v) for v in line[1:]]
    missing = [c for c, k in want.items() if rows[k] is None]
    if missing:
        raise EmissionError(f"cells {missing} are not source cells")
    return PointSource.from_samples(list(want), np.array(rows), float(header["h"]))


def profile_config_dict(cfg: ProfileConfig) -> dict:
    return asdict(cfg)
