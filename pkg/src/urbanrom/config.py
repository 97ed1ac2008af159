"""Experiment configuration, presets and the synthetic wind climate."""

from __future__ import annotations

import copy
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .emission import ProfileConfig
from .flow import FluxField, unit_wind_fluxes
from .grid import GridConfig, load_grid_config
from .mlp import encode_wind

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESETS",
    "WindSchedule",
    "load_config",
    "preset",
    "read_wind_csv",
    "synthesize_wind_day",
    "write_wind_csv",
]


class ConfigError(ValueError):
    """Raised for invalid experiment configurations."""


_DESK = {
    "case": {"seed": 7},
    "grid": {
        "lx": 1000.0, "ly": 1000.0, "nx": 100, "ny": 100,
        "obstacles": [[300.0, 300.0, 450.0, 420.0], [600.0, 550.0, 700.0, 800.0],
                      [150.0, 650.0, 300.0, 750.0]],
        "roads": [[[0.0, 505.0], [1000.0, 505.0]], [[525.0, 0.0], [525.0, 1000.0]],
                  [[0.0, 205.0], [1000.0, 205.0]]],
    },
    "wind": {
        "prevailing_deg": 30.0, "day_spread_deg": 6.0, "hourly_walk_deg": 5.0,
        "speed_median": 3.0, "day_speed_sigma": 0.3, "hourly_speed_walk": 0.08,
        "diurnal_speed_amp": 0.3, "diurnal_peak_hour": 14.0,
        "speed_min": 0.5, "speed_max": 15.0, "sample_interval": 3600.0,
    },
    "emission": {
        "h": 300.0, "rate": 1.0e-6, "noise": 0.4, "segment_share": 0.95,
        "segment_length": 200.0,
    },
    "days": {"train": [0, 1, 2, 3, 4], "test": [5, 6]},
    "fom": {
        "nu": 1.5e-5, "dt": 100.0, "record_every": 300.0, "horizon": 86400.0,
        "train_window": 86400.0, "inlet": 0.0,
    },
    "reduction": {
        "n_rb": 50, "n_deim": 20, "n_phi": 20,
        "models": [[10, 10, 10], [10, 10, 50], [20, 20, 50]],
        "speedup_n_rb": 30, "speedup_n_deim": 60,
    },
    "nn": {
        "hidden": [32, 32, 32, 32, 32, 32], "activation": "relu", "epochs": 2000,
        "batch_size": 32, "lr": 1.0e-3, "weight_decay": 1.0e-8, "seed": 0, "split": 0.7,
        "homogeneous": True,
    },
    "timing": {"repeats": 3},
}

_SMALL = copy.deepcopy(_DESK)
_SMALL["grid"].update(
    lx=300.0, ly=300.0, nx=30, ny=30,
    obstacles=[[90.0, 90.0, 135.0, 126.0], [180.0, 165.0, 210.0, 240.0]],
    roads=[[[0.0, 151.5], [300.0, 151.5]], [[157.5, 0.0], [157.5, 300.0]]],
)
_SMALL["emission"].update(segment_length=60.0)
_SMALL["days"] = {"train": [0, 1], "test": [2]}
_SMALL["fom"].update(horizon=7200.0, train_window=7200.0, record_every=100.0)
_SMALL["reduction"].update(n_rb=20, n_deim=10, n_phi=10, models=[[5, 5, 10], [10, 10, 20]],
                           speedup_n_rb=10, speedup_n_deim=10)
_SMALL["nn"].update(hidden=[16, 16, 16], epochs=100)

_FULL = copy.deepcopy(_DESK)
_FULL["grid"].update(
    lx=2000.0, ly=2000.0, nx=200, ny=200,
    obstacles=[[600.0, 600.0, 900.0, 840.0], [1200.0, 1100.0, 1400.0, 1600.0],
               [450.0, 1300.0, 700.0, 1500.0], [1500.0, 200.0, 1750.0, 380.0]],
    roads=[[[0.0, 1010.0], [2000.0, 1010.0]], [[1050.0, 0.0], [1050.0, 2000.0]],
           [[0.0, 410.0], [2000.0, 410.0]], [[410.0, 0.0], [410.0, 2000.0]]],
)
_FULL["days"] = {"total": 325}
_FULL["fom"].update(train_window=10200.0)
_FULL["reduction"].update(models=[[10, 10, 10], [10, 10, 50], [20, 20, 50], [50, 50, 100],
                                  [30, 30, 80]])
_FULL["nn"].update(epochs=80000)

PRESETS = {"desk": _DESK, "small": _SMALL, "full": _FULL}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Validated experiment settings; ``data`` is the canonical nested dict."""

    data: dict

    def __post_init__(self):
        d = self.data
        days = d["days"]
        if "train" not in days:
            total = int(days.get("total", 0))
            if total < 2:
                raise ConfigError("days: give train/test lists or total >= 2")
            n_train = int(round(float(d["nn"]["split"]) * total))
            n_train = min(max(n_train, 1), total - 1)
            days = dict(train=list(range(n_train)), test=list(range(n_train, total)))
            d["days"] = days
        d["days"] = {"train": sorted(int(x) for x in days["train"]),
                     "test": sorted(int(x) for x in days["test"])}
        self.validate()

    def validate(self) -> None:
        d = self.data
        train, test = d["days"]["train"], d["days"]["test"]
        if not train or not test:
            raise ConfigError("train and test day lists must be non-empty")
        if set(train) & set(test):
            raise ConfigError(f"train and test days overlap: {sorted(set(train) & set(test))}")
        if min(train + test) < 0:
            raise ConfigError("day indices must be >= 0")
        split = float(d["nn"]["split"])
        if not 0.0 < split < 1.0:
            raise ConfigError("split must lie in (0, 1)")
        r = d["reduction"]
        sizes = [r["n_rb"], r["n_deim"], r["n_phi"], r["speedup_n_rb"], r["speedup_n_deim"]]
        sizes += [v for m in r["models"] for v in m]
        if min(int(s) for s in sizes) < 1:
            raise ConfigError("reduction sizes must be >= 1")
        if any(len(m) != 3 for m in r["models"]):
            raise ConfigError("each model is [n_phi, n_deim, n_rb]")
        f = d["fom"]
        for key in ("dt", "record_every", "horizon", "train_window"):
            if float(f[key]) <= 0:
                raise ConfigError(f"fom.{key} must be positive")
        for key in ("horizon", "record_every"):
            ratio = float(f[key]) / float(f["dt"])
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError(f"fom.{key} must be a multiple of fom.dt")
        if float(f["horizon"]) > float(self.profile.day_length):
            raise ConfigError("fom.horizon cannot exceed one day")
        self.grid.validate(require_roads=True)
        self.profile.validate()
        if int(d["nn"]["epochs"]) < 1 or float(d["nn"]["lr"]) <= 0:
            raise ConfigError("nn.epochs must be >= 1 and nn.lr > 0")

    # convenience views
    @property
    def seed(self) -> int:
        return int(self.data["case"]["seed"])

    @property
    def grid(self) -> GridConfig:
        return load_grid_config(self.data["grid"])

    @property
    def profile(self) -> ProfileConfig:
        e = self.data["emission"]
        keys = ("h", "rate", "noise", "segment_share", "segment_length", "night_level")
        return ProfileConfig(**{k: float(e[k]) for k in keys if k in e})

    @property
    def train_days(self) -> list[int]:
        return list(self.data["days"]["train"])

    @property
    def test_days(self) -> list[int]:
        return list(self.data["days"]["test"])

    @property
    def all_days(self) -> list[int]:
        return sorted(self.train_days + self.test_days)

    @property
    def fom(self) -> dict:
        return {k: float(v) for k, v in self.data["fom"].items()}

    @property
    def reduction(self) -> dict:
        return self.data["reduction"]

    @property
    def models(self) -> list[tuple[int, int, int]]:
        r = self.reduction
        out = [tuple(int(v) for v in m) for m in r["models"]]
        main = (int(r["n_phi"]), int(r["n_deim"]), int(r["n_rb"]))
        return out + ([main] if main not in out else [])

    @property
    def n_rb_max(self) -> int:
        return max([m[2] for m in self.models] + [int(self.reduction["speedup_n_rb"])])

    @property
    def n_deim_max(self) -> int:
        return max([m[1] for m in self.models] + [int(self.reduction["speedup_n_deim"])])

    @property
    def n_phi_max(self) -> int:
        return max(m[0] for m in self.models)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True) + "\n"


def preset(name: str = "desk", **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(_merge(PRESETS[name], overrides))


def load_config(path) -> ExperimentConfig:
    """Load a TOML (or JSON) config; missing keys fall back to ``base`` preset."""
    path = Path(path)
    text = path.read_text()
    raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    base = raw.get("case", {}).get("base", "desk")
    if base not in PRESETS:
        raise ConfigError(f"unknown base preset {base!r}")
    merged = _merge(PRESETS[base], raw)
    merged["case"].pop("base", None)
    if "days" in raw:
        merged["days"] = copy.deepcopy(raw["days"])
    return ExperimentConfig(merged)


# ---------------------------------------------------------------------------
# wind climate


def synthesize_wind_day(seed: int, day: int, wind: dict, day_length: float = 86400.0):
    """Wind samples ``(times, mu1, mu2)`` for one day.

    The daily mean direction scatters around the prevailing one; within the
    day direction and log-speed follow Gaussian random walks.  Each day uses
    its own stream so the result does not depend on which other days exist.
    A diurnal cycle of amplitude ``diurnal_speed_amp`` (log-speed) peaks at
    ``diurnal_peak_hour``.
    """
    rng = np.random.default_rng([int(seed), 1, int(day)])
    step = float(wind["sample_interval"])
    n = int(round(day_length / step)) + 1
    times = np.arange(n) * step
    d0 = math.radians(float(wind["prevailing_deg"])) + rng.normal(
        0.0, math.radians(float(wind["day_spread_deg"])))
    ang = d0 + np.cumsum(rng.normal(0.0, math.radians(float(wind["hourly_walk_deg"])), n))
    log_s = (math.log(float(wind["speed_median"]))
             + float(wind["day_speed_sigma"]) * rng.standard_normal()
             + np.cumsum(rng.normal(0.0, float(wind["hourly_speed_walk"]), n)))
    phase = 2.0 * math.pi * (times / 3600.0 - float(wind.get("diurnal_peak_hour", 14.0))) / 24.0
    log_s = log_s + float(wind.get("diurnal_speed_amp", 0.0)) * np.cos(phase)
    speed = np.clip(np.exp(log_s), float(wind["speed_min"]), float(wind["speed_max"]))
    return times, speed, np.mod(ang, 2.0 * math.pi)


def write_wind_csv(path, times, mu1, mu2) -> None:
    """Columns: time (s), mu1 (speed, m/s), mu2 (direction, rad in [0, 2 pi))."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mu1", "mu2"])
        for row in zip(times, mu1, mu2):
            w.writerow([repr(float(v)) for v in row])


def read_wind_csv(path) -> "WindSchedule":
    rows = []
    with open(Path(path), newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if [h.strip() for h in header[:3]] != ["time", "mu1", "mu2"]:
            raise ConfigError(f"{path}: expected header time,mu1,mu2")
        for line in r:
            rows.append([float(v) for v in line[:3]])
    a = np.array(rows)
    return WindSchedule(a[:, 0], a[:, 1], a[:, 2])


class WindSchedule:
    """Piecewise-linear wind between samples, interpolated on the velocity vector."""

    def __init__(self, times, mu1, mu2):
        self.times = np.asarray(times, dtype=float)
        if self.times.size < 2 or np.any(np.diff(self.times) <= 0):
            raise ConfigError("wind sample times must be increasing (>= 2 samples)")
        self.mu1 = np.asarray(mu1, dtype=float)
        self.mu2 = np.asarray(mu2, dtype=float)
        if np.any(self.mu1 < 0):
            raise ConfigError("wind speed must be non-negative")
        uv = encode_wind(self.mu1, self.mu2)
        self.ux, self.uy = uv[:, 0].copy(), uv[:, 1].copy()

    def encoded(self, t) -> np.ndarray:
        """Velocity ``(ux, uy)`` at time(s) ``t``; shape (..., 2)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < self.times[0] - 1e-9) or np.any(t > self.times[-1] + 1e-9):
            raise ConfigError("time outside the wind schedule")
        return np.stack([np.interp(t, self.times, self.ux), np.interp(t, self.times, self.uy)],
                        axis=-1)

    def flux(self, g):
        """Callable ``t -> FluxField`` for this schedule on grid ``g``."""
        px, py = unit_wind_fluxes(g)

        def phi(t):
            ux, uy = self.encoded(t)
            return FluxField(ux * px.values + uy * py.values, g.n_interior)

        return phi
