"""Command-line orchestration of the offline and online stages.

Every stage reads and writes inside one case directory.  A hash manifest
(``manifest.json``) records the inputs and outputs of each stage so that
re-running a stage with unchanged inputs is a no-op.  Recorded outputs
that no longer match their hash are reported as errors, never silently
regenerated; ``--force`` recomputes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import emission as em
from .config import (
    ConfigError,
    ExperimentConfig,
    PRESETS,
    load_config,
    preset,
    read_wind_csv,
    synthesize_wind_day,
    write_wind_csv,
)
from .deim import build_deim, deim_error_curve, write_magic_points
from .fom import SnapshotMatrix, TransportOperators, assemble_diffusion, run_fom
from .grid import grid_from_config, write_grid_csv
from .mlp import Mlp, TrainConfig, train, write_loss_csv
from .pod import PodBasis, compute_pod, projection_errors, write_eigen_csv
from .rom import (
    ReducedTrajectory,
    build_rom,
    evaluate,
    load_rom,
    nn_flux_schedule,
    projected_flux_schedule,
    run_rom,
    save_rom,
    stack_flux,
)
from .storage import CorruptFileError, read_matrix, write_matrix

__all__ = ["Case", "CaseError", "main", "run_all"]


CASE_ROOT_ENV = "URBANROM_CASE_ROOT"
ROLES = ("concentration", "flux", "source")


class CaseError(RuntimeError):
    """Raised for missing prerequisites or inconsistent case directories."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def model_name(n_phi: int, n_deim: int, n_rb: int) -> str:
    return f"phi{n_phi}_deim{n_deim}_rb{n_rb}"


class Case:
    """A case directory and lazily loaded views of its contents."""

    def __init__(self, root):
        self.root = Path(root)
        self._grid = None
        cfg = self.root / "config.json"
        self.config = ExperimentConfig(json.loads(cfg.read_text())) if cfg.exists() else None

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require_config(self) -> ExperimentConfig:
        if self.config is None:
            raise CaseError(f"{self.root} is not a case (run generate-case first)")
        return self.config

    @property
    def grid(self):
        if self._grid is None:
            self._grid = grid_from_config(self.require_config().grid, require_roads=True)
        return self._grid

    @property
    def day_length(self) -> float:
        return self.require_config().profile.day_length

    def wind(self, day: int):
        return read_wind_csv(self.path("wind", f"day_{day:03d}.csv"))

    def emission(self):
        return em.read_series(self.path("emission.csv"))

    def fom_snapshots(self, day: int) -> SnapshotMatrix:
        p = self.path("fom", f"day_{day:03d}.rmdm")
        if not p.exists():
            raise CaseError(f"no FOM run for day {day} (run fom-run)")
        times = read_matrix(self.path("fom", f"day_{day:03d}_times.rmdm"))[:, 0]
        return SnapshotMatrix(read_matrix(p), times)

    def basis(self, role: str) -> PodBasis:
        p = self.path("pod", f"{role}_modes.rmdm")
        if not p.exists():
            raise CaseError(f"no {role} basis (run pod --role {role})")
        return PodBasis(read_matrix(p), read_matrix(self.path("pod", f"{role}_lambda.rmdm"))[:, 0],
                        read_matrix(self.path("pod", f"{role}_weights.rmdm"))[:, 0], role)

    def instants(self, window: float | None = None) -> np.ndarray:
        """Recorded instants in ``(0, window]`` (local day time)."""
        f = self.require_config().fom
        window = f["train_window"] if window is None else window
        n = int(round(f["horizon"] / f["record_every"]))
        t = f["record_every"] * np.arange(1, n + 1)
        return t[t <= window + 1e-9]

    # manifest --------------------------------------------------------------
    def _manifest(self) -> dict:
        p = self.path("manifest.json")
        return json.loads(p.read_text()) if p.exists() else {}

    def _save_manifest(self, m: dict) -> None:
        tmp = self.path("manifest.json.tmp")
        tmp.write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.path("manifest.json"))

    def digest(self, params: dict, inputs) -> str:
        h = hashlib.sha256(json.dumps(params, sort_keys=True).encode())
        for p in sorted(Path(p) for p in inputs):
            if not p.exists():
                raise CaseError(f"missing input {p.relative_to(self.root)}")
            h.update(str(p.relative_to(self.root)).encode())
            h.update(_sha256(p).encode())
        return h.hexdigest()

    def fresh(self, key: str, params: dict, inputs) -> bool:
        """True when ``key`` is recorded with these inputs and its outputs are intact.

        Raises :class:`CorruptFileError` if a recorded output changed on disk.
        """
        entry = self._manifest().get(key)
        if not entry or entry["inputs"] != self.digest(params, inputs):
            return False
        outs = entry["outputs"]
        if not all(self.path(r).exists() for r in outs):
            return False
        bad = [r for r, h in outs.items() if _sha256(self.path(r)) != h]
        if bad:
            raise CorruptFileError(f"{key}: outputs modified or corrupt: {', '.join(bad)} "
                                   "(use --force)")
        return True

    def record(self, key: str, params: dict, inputs, outputs) -> None:
        m = self._manifest()
        m[key] = dict(inputs=self.digest(params, inputs), outputs={
            str(Path(p).relative_to(self.root)): _sha256(Path(p)) for p in sorted(outputs)})
        self._save_manifest(m)

    def stage(self, key: str, params: dict, inputs, fn, force: bool = False) -> bool:
        """Run ``fn`` unless up-to-date; returns True if it ran.

        ``fn`` returns the list of output paths it produced.
        """
        if not force and self.fresh(key, params, inputs):
            print(f"{key}: up-to-date")
            return False
        outputs = fn()
        self.record(key, params, inputs, outputs)
        print(f"{key}: done")
        return True


def _map(fn, items, jobs: int):
    """Apply ``fn`` to ``items`` (in a bounded pool when jobs > 1); sorted results."""
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
            results = list(pool.map(fn, items))
    else:
        results = [fn(x) for x in items]
    return sorted(results, key=lambda r: r[0])


# ---------------------------------------------------------------------------
# stages


def generate_case(root, cfg: ExperimentConfig, force: bool = False) -> Case:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    existing = root / "config.json"
    if existing.exists() and not force:
        if json.loads(existing.read_text()) != json.loads(cfg.to_json()):
            raise CaseError(f"{root} holds a different configuration (use --force)")
    existing.write_text(cfg.to_json())
    case = Case(root)

    def work():
        g = case.grid
        write_grid_csv(g, case.path("grid.csv"))
        case.path("wind").mkdir(exist_ok=True)
        outs = [case.path("grid.csv")]
        for d in cfg.all_days:
            t, mu1, mu2 = synthesize_wind_day(cfg.seed, d, cfg.data["wind"], case.day_length)
            p = case.path("wind", f"day_{d:03d}.csv")
            write_wind_csv(p, t, mu1, mu2)
            outs.append(p)
        prof = cfg.profile
        labels = em.segment_labels(g, prof.segment_length)
        series = em.synthesize_series(cfg.seed, max(cfg.all_days) + 1, g.road_cells, prof, labels)
        em.write_series(series, case.path("emission.csv"))
        return outs + [case.path("emission.csv"), case.path("emission.json")]

    case.stage("generate-case", {}, [existing], work, force)
    return case


def _fom_day(args):
    root, day = args
    case = Case(root)
    f = case.config.fom
    g = case.grid
    snap, seconds = run_fom(g, case.wind(day).flux(g), case.emission(), f["horizon"], f["dt"],
                            f["record_every"], nu=f["nu"], inlet=f["inlet"],
                            t_offset=day * case.day_length)
    write_matrix(case.path("fom", f"day_{day:03d}.rmdm"), snap.values)
    write_matrix(case.path("fom", f"day_{day:03d}_times.rmdm"), snap.times)
    return day, seconds


def fom_run(case: Case, days=None, jobs: int = 1, force: bool = False) -> None:
    cfg = case.require_config()
    days = cfg.all_days if days is None else sorted(days)
    unknown = sorted(set(days) - set(cfg.all_days))
    if unknown:
        raise CaseError(f"days {unknown} are not part of the case")
    case.path("fom").mkdir(exist_ok=True)

    def spec(d):
        ins = [case.path("config.json"), case.path("emission.csv"),
               case.path("wind", f"day_{d:03d}.csv")]
        outs = [case.path("fom", f"day_{d:03d}.rmdm"), case.path("fom", f"day_{d:03d}_times.rmdm")]
        return f"fom-run:day_{d:03d}", {"day": d}, ins, outs

    stale = []
    for d in days:
        key, params, ins, _ = spec(d)
        if force or not case.fresh(key, params, ins):
            stale.append(d)
        else:
            print(f"{key}: up-to-date")
    results = _map(_fom_day, [(str(case.root), d) for d in stale], jobs)
    timing = _read_timing(case.path("fom", "timing.csv"))
    for d, seconds in results:
        timing[d] = seconds
        key, params, ins, outs = spec(d)
        case.record(key, params, ins, outs)
        print(f"{key}: done ({seconds:.2f} s)")
    _write_csv(case.path("fom", "timing.csv"), ["day", "seconds"],
               [(d, float(x)) for d, x in sorted(timing.items())])


def _read_timing(path: Path) -> dict:
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return {int(row[0]): float(row[1]) for row in r}


def _training_snapshots(case: Case, role: str) -> np.ndarray:
    cfg = case.require_config()
    g = case.grid
    t = case.instants()
    cols = []
    if role == "concentration":
        for d in cfg.train_days:
            s = case.fom_snapshots(d)
            cols.append(s.values[:, s.times <= cfg.fom["train_window"] + 1e-9])
    elif role == "flux":
        for d in cfg.train_days:
            phi = case.wind(d).flux(g)
            cols.append(np.column_stack([stack_flux(phi(x)) for x in t]))
    else:
        series = case.emission()
        for d in cfg.train_days:
            block = np.zeros((g.n_cells, t.size))
            block[series.road_cells] = series.values_many(d * case.day_length + t)
            cols.append(block)
    return np.hstack(cols)


def pod_stage(case: Case, role: str, n: int | None = None, *, rank_tol: float = 1e-12,
              force: bool = False) -> None:
    cfg = case.require_config()
    if role not in ROLES:
        raise CaseError(f"role must be one of {ROLES}")
    default_n = dict(concentration=cfg.n_rb_max, flux=cfg.n_phi_max, source=cfg.n_deim_max)[role]
    n = default_n if n is None else n
    case.path("pod").mkdir(exist_ok=True)
    inputs = [case.path("config.json")]
    if role == "concentration":
        inputs += [case.path("fom", f"day_{d:03d}.rmdm") for d in cfg.train_days]
    elif role == "source":
        inputs += [case.path("emission.csv")]
    else:
        inputs += [case.path("wind", f"day_{d:03d}.csv") for d in cfg.train_days]

    def work():
        S = _training_snapshots(case, role)
        w = case.grid.volumes if role != "flux" else None
        basis = compute_pod(S, w, min(n, S.shape[1]), role=role, rank_tol=rank_tol)
        if basis.n_modes < n:
            print(f"pod: {role} basis truncated to {basis.n_modes} modes (numerical rank)")
        outs = [case.path("pod", f"{role}_{k}.rmdm") for k in ("modes", "lambda", "weights")]
        write_matrix(outs[0], basis.modes)
        write_matrix(outs[1], basis.eigenvalues)
        write_matrix(outs[2], basis.weights)
        write_eigen_csv(basis, case.path("pod", f"{role}_eigen.csv"))
        return outs + [case.path("pod", f"{role}_eigen.csv")]

    case.stage(f"pod:{role}", dict(n=n, rank_tol=rank_tol), inputs, work, force)


def deim_stage(case: Case, n_deim: int | None = None, force: bool = False) -> None:
    cfg = case.require_config()
    n_deim = int(cfg.reduction["n_deim"]) if n_deim is None else n_deim
    d = case.path("deim")
    d.mkdir(exist_ok=True)

    def work():
        U = case.basis("source")
        model = build_deim(U, n_deim=min(n_deim, U.n_modes), support=case.grid.road_cells)
        write_magic_points(model, case.grid, d / f"magic_points_{n_deim}.csv")
        return [d / f"magic_points_{n_deim}.csv"]

    case.stage(f"deim-build:{n_deim}", dict(n_deim=n_deim),
               [case.path("pod", "source_modes.rmdm")], work, force)


def _nn_dataset(case: Case):
    cfg = case.require_config()
    Psi = case.basis("flux")
    t = case.instants()
    X = np.vstack([case.wind(d).encoded(t) for d in cfg.train_days])
    Y = (Psi.modes.T @ _training_snapshots(case, "flux")).T
    return X, Y, Psi


def train_stage(case: Case, force: bool = False, epochs: int | None = None) -> None:
    cfg = case.require_config()
    nn = dict(cfg.data["nn"])
    if epochs is not None:
        nn["epochs"] = epochs
    d = case.path("nn")

    def work():
        X, Y, Psi = _nn_dataset(case)
        rng = np.random.default_rng([int(nn["seed"]), 2])
        perm = rng.permutation(X.shape[0])
        n_train = max(1, int(round(float(nn["split"]) * X.shape[0])))
        tr, te = perm[:n_train], perm[n_train:]
        net = Mlp([2] + list(nn["hidden"]) + [Y.shape[1]], nn["activation"], seed=int(nn["seed"]))
        tc = TrainConfig(lr=float(nn["lr"]), weight_decay=float(nn["weight_decay"]),
                         epochs=int(nn["epochs"]), batch_size=int(nn["batch_size"]),
                         seed=int(nn["seed"]), loss_weights=Psi.normalized[: Y.shape[1]],
                         homogeneous=bool(nn.get("homogeneous", False)))
        net, hist = train(net, X[tr], Y[tr], tc, X[te] if te.size else None,
                          Y[te] if te.size else None)
        net.save(d)
        write_loss_csv(hist, d / "loss.csv")
        return sorted(d.glob("*.rmdm")) + [d / "net.json", d / "loss.csv"]

    inputs = [case.path("pod", "flux_modes.rmdm"), case.path("config.json")]
    inputs += [case.path("wind", f"day_{x:03d}.csv") for x in cfg.train_days]
    case.stage("train-flux-nn", nn, inputs, work, force)


def rom_build(case: Case, n_rb: int, n_deim: int, n_phi: int, force: bool = False) -> Path:
    cfg = case.require_config()
    name = model_name(n_phi, n_deim, n_rb)
    out = case.path("rom", name)

    def work():
        g = case.grid
        Phi = case.basis("concentration")
        Psi = case.basis("flux")
        U = case.basis("source")
        for label, have, want in (("N_rb", Phi.n_modes, n_rb), ("N_phi", Psi.n_modes, n_phi),
                                  ("N_DEIM", U.n_modes, n_deim)):
            if want > have:
                raise CaseError(f"{label} = {want} exceeds the {have} available modes")
        Phi, Psi = Phi.truncate(n_rb), Psi.truncate(n_phi)
        model = build_deim(U, Phi, n_deim, support=g.road_cells)
        f = cfg.fom
        ops = TransportOperators(g.volumes, assemble_diffusion(g, f["nu"]), None, None)
        rom = build_rom(g, Phi, Psi, ops, model, inlet=f["inlet"])
        series = case.emission()
        rom.meta.update(dt=f["dt"], record_every=f["record_every"], horizon=f["horizon"],
                        source_h=series.h)
        save_rom(rom, out)
        # source feed at the magic points, all the online DEIM path may read
        write_matrix(out / "source_points.rmdm",
                     series.samples[series.rows_for_cells(model.magic_points)])
        return sorted(out.glob("*"))

    inputs = [case.path("pod", f"{r}_modes.rmdm") for r in ROLES]
    inputs += [case.path("config.json"), case.path("emission.csv")]
    case.stage(f"rom-build:{name}", dict(n_rb=n_rb, n_deim=n_deim, n_phi=n_phi), inputs, work,
               force)
    return out


def _rom_day(args):
    root, name, day, source_path, flux_kind, repeats = args
    case = Case(root)
    f = case.config.fom
    rom_dir = case.path("rom", name)
    rom = load_rom(rom_dir, online_only=(source_path == "deim" and flux_kind == "nn"))
    wind = case.wind(day)
    if flux_kind == "nn":
        flux = nn_flux_schedule(Mlp.load(case.path("nn")), wind.encoded, rom.n_phi)
    else:
        flux = projected_flux_schedule(rom.Psi, wind.flux(case.grid))
    if source_path == "deim":
        source = em.PointSource.from_samples(rom.deim.magic_points,
                                             read_matrix(rom_dir / "source_points.rmdm"),
                                             rom.meta["source_h"])
    else:
        source = case.emission()
    runs = [run_rom(rom, flux, source, f["horizon"], f["dt"], source_path=source_path,
                    record_every=f["record_every"], t_offset=day * case.day_length)
            for _ in range(max(1, repeats))]
    tr = runs[0]
    run_dir = case.path("runs", name, f"{source_path}_{flux_kind}")
    write_matrix(run_dir / f"day_{day:03d}.rmdm", tr.coefficients)
    write_matrix(run_dir / f"day_{day:03d}_times.rmdm", tr.times)
    return day, float(np.median([r.elapsed for r in runs]))


def rom_run(case: Case, n_rb: int, n_deim: int, n_phi: int, days=None, source_path="deim",
            flux_kind="nn", jobs: int = 1, force: bool = False) -> Path:
    cfg = case.require_config()
    days = cfg.test_days if days is None else sorted(days)
    name = model_name(n_phi, n_deim, n_rb)
    rom_dir = case.path("rom", name)
    if not (rom_dir / "manifest.json").exists():
        raise CaseError(f"ROM {name} not built (run rom-build)")
    run_dir = case.path("runs", name, f"{source_path}_{flux_kind}")
    run_dir.mkdir(parents=True, exist_ok=True)
    repeats = int(cfg.data["timing"]["repeats"])
    online = ["manifest.json", "M_r.rmdm", "B_r.rmdm", "Gamma.rmdm", "Gc.rmdm"]
    if source_path == "deim":
        online += ["deim_points.rmdm", "F_r.rmdm", "source_points.rmdm"]
        base_inputs = [rom_dir / x for x in online]
    else:
        base_inputs = [rom_dir / x for x in online + ["Phi.rmdm"]] + [case.path("emission.csv")]
    if flux_kind == "nn":
        base_inputs += [case.path("nn", "net.json")] + sorted(case.path("nn").glob("*.rmdm"))
    else:
        base_inputs += [rom_dir / "Psi.rmdm"]

    stale = []
    for d in days:
        ins = base_inputs + [case.path("wind", f"day_{d:03d}.csv")]
        key = f"rom-run:{name}:{source_path}_{flux_kind}:day_{d:03d}"
        if force or not case.fresh(key, {}, ins):
            stale.append(d)
        else:
            print(f"{key}: up-to-date")
    results = _map(_rom_day, [(str(case.root), name, d, source_path, flux_kind, repeats)
                              for d in stale], jobs)
    timing = _read_timing(run_dir / "timing.csv")
    for d, seconds in results:
        timing[d] = seconds
        ins = base_inputs + [case.path("wind", f"day_{d:03d}.csv")]
        key = f"rom-run:{name}:{source_path}_{flux_kind}:day_{d:03d}"
        case.record(key, {}, ins, [run_dir / f"day_{d:03d}.rmdm",
                                   run_dir / f"day_{d:03d}_times.rmdm"])
        print(f"{key}: done")
    _write_csv(run_dir / "timing.csv", ["day", "seconds"],
               [(d, float(s)) for d, s in sorted(timing.items())])
    return run_dir


def evaluate_case(case: Case, models=None, days=None, source_paths=("deim",), flux_kind="nn",
                  jobs: int = 1, force: bool = False) -> dict:
    """Build/run what is missing, then write the metrics CSVs; returns a summary."""
    cfg = case.require_config()
    days = cfg.test_days if days is None else sorted(days)
    models = cfg.models if models is None else models
    mdir = case.path("metrics")
    mdir.mkdir(exist_ok=True)
    g = case.grid

    Phi = case.basis("concentration")
    train_snap = np.hstack([case.fom_snapshots(d).values for d in cfg.train_days])
    test_snaps = {d: case.fom_snapshots(d) for d in days}
    test_all = np.hstack([s.values for s in test_snaps.values()])
    rows = []
    for n in range(0, Phi.n_modes + 1):
        e_tr, _ = projection_errors(Phi, train_snap, n)
        e_te, _ = projection_errors(Phi, test_all, n)
        rows.append((n, float(e_tr.mean()), float(e_te.mean())))
    _write_csv(mdir / "err_prj.csv", ["n", "train", "test"], rows)

    U = case.basis("source")
    series = case.emission()
    t = case.instants()

    def source_block(ds, times):
        out = np.zeros((g.n_cells, len(ds) * times.size))
        out[series.road_cells] = np.hstack([series.values_many(d * case.day_length + times)
                                            for d in ds])
        return out

    src_test = source_block(days, case.instants(cfg.fom["horizon"]))
    curve = deim_error_curve(U, range(1, U.n_modes + 1), source_block(cfg.train_days, t),
                             src_test, support=g.road_cells)
    _write_csv(mdir / "deim_error.csv", ["n_deim", "train", "test"], curve)

    fom_seconds = _read_timing(case.path("fom", "timing.csv"))
    daily, series_rows, speed, table = [], [], [], []
    worst = None
    for (n_phi, n_deim, n_rb) in models:
        name = model_name(n_phi, n_deim, n_rb)
        rom_build(case, n_rb, n_deim, n_phi, force=force)
        Phi_n = Phi.truncate(n_rb)
        for sp in source_paths:
            run_dir = rom_run(case, n_rb, n_deim, n_phi, days, sp, flux_kind, jobs, force)
            rom_seconds = _read_timing(run_dir / "timing.csv")
            errs = []
            for d in days:
                coeffs = read_matrix(run_dir / f"day_{d:03d}.rmdm")
                times = read_matrix(run_dir / f"day_{d:03d}_times.rmdm")[:, 0]
                fom = test_snaps[d]
                tr = ReducedTrajectory(coeffs, times - d * case.day_length, rom_seconds[d])
                m = evaluate(fom, tr, Phi_n, fom_seconds.get(d))
                errs.append(m.err_rb)
                daily.append((name, n_phi, n_deim, n_rb, sp, d, m.err_rb))
                series_rows += [(name, sp, d, float(x), float(e))
                                for x, e in zip(m.times, m.errors)]
                speed.append((name, sp, d, fom_seconds.get(d, float("nan")), rom_seconds[d],
                              m.speedup if m.speedup is not None else float("nan")))
                if worst is None or float(m.errors.max()) > worst[0]:
                    worst = (float(m.errors.max()), name, sp, d, m.worst_time, m.worst_field)
            table.append((name, n_phi, n_deim, n_rb, sp, float(np.mean(errs))))
    _write_csv(mdir / "daily_err_rb.csv",
               ["model", "n_phi", "n_deim", "n_rb", "source_path", "day", "err_rb"], daily)
    _write_csv(mdir / "err_rb_series.csv", ["model", "source_path", "day", "time", "error"],
               series_rows)
    _write_csv(mdir / "models.csv", ["model", "n_phi", "n_deim", "n_rb", "source_path",
                                     "mean_err_rb"], table)
    _write_csv(mdir / "speedup.csv", ["model", "source_path", "day", "fom_seconds",
                                      "rom_seconds", "speedup"], speed)
    if worst is not None:
        c = g.centers
        _write_csv(mdir / "worst_field.csv", ["cell", "x", "y", "delta_c_rel"],
                   [(k, float(c[k, 0]), float(c[k, 1]), float(v))
                    for k, v in enumerate(worst[5])])
        (mdir / "worst_field.json").write_text(json.dumps(
            dict(error=worst[0], model=worst[1], source_path=worst[2], day=worst[3],
                 time=worst[4]), indent=1, sort_keys=True) + "\n")
    for row in table:
        print(f"{row[0]} [{row[4]}]: mean Err_rb = {row[5]:.6g}")
    return {(r[1], r[2], r[3], r[4]): r[5] for r in table}


def run_all(case: Case, jobs: int = 1, force: bool = False) -> dict:
    case.require_config()
    fom_run(case, jobs=jobs, force=force)
    for role in ROLES:
        pod_stage(case, role, force=force)
    deim_stage(case, force=force)
    train_stage(case, force=force)
    return evaluate_case(case, jobs=jobs, force=force)


# ---------------------------------------------------------------------------
# CLI


def _case_path(arg: str | None) -> Path:
    if arg is None:
        raise CaseError("--case is required")
    p = Path(arg)
    root = os.environ.get(CASE_ROOT_ENV)
    if root and not p.is_absolute() and not p.exists():
        return Path(root) / p
    return p


def _days(arg):
    if arg is None:
        return None
    out = []
    for part in arg.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out += list(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urbanrom", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--case", help=f"case directory (relative names resolve under ${CASE_ROOT_ENV})")
        s.add_argument("--force", action="store_true", help="recompute even if up-to-date")
        s.add_argument("--jobs", type=int, default=1, help="worker processes")
        return s

    s = add("generate-case", "write grid, wind schedules and emissions")
    s.add_argument("--config", default="desk", help=f"TOML/JSON file or preset {sorted(PRESETS)}")
    s.add_argument("--seed", type=int, help="override case seed")
    s = add("fom-run", "run the full-order model")
    s.add_argument("--days", help="e.g. 0,1,5-6 (default: all)")
    s = add("pod", "extract a POD basis")
    s.add_argument("--role", choices=ROLES, default="concentration")
    s.add_argument("--n", type=int, help="number of modes")
    s.add_argument("--rank-tol", type=float, default=1e-12)
    s = add("deim-build", "select magic points")
    s.add_argument("--n-deim", type=int)
    s = add("train-flux-nn", "train the flux-coefficient network")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int, help="override the network seed")
    for name, help_ in (("rom-build", "assemble reduced operators"),
                        ("rom-run", "run the reduced model"),
                        ("evaluate", "write metrics CSVs")):
        s = add(name, help_)
        s.add_argument("--n-rb", type=int)
        s.add_argument("--n-deim", type=int)
        s.add_argument("--n-phi", type=int)
        if name != "rom-build":
            s.add_argument("--days")
            s.add_argument("--source-path", choices=("projection", "deim"), default="deim")
            s.add_argument("--flux", choices=("nn", "exact"), default="nn")
    add("run-all", "all stages with the configured defaults")
    return p


def _sizes(case: Case, args):
    r = case.require_config().reduction
    return (args.n_rb or int(r["n_rb"]), args.n_deim or int(r["n_deim"]),
            args.n_phi or int(r["n_phi"]))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        root = _case_path(args.case)
        if args.command == "generate-case":
            src = args.config
            cfg = preset(src) if src in PRESETS else load_config(src)
            if args.seed is not None:
                data = json.loads(cfg.to_json())
                data["case"]["seed"] = args.seed
                cfg = ExperimentConfig(data)
            generate_case(root, cfg, args.force)
            return 0
        case = Case(root)
        case.require_config()
        if args.command == "fom-run":
            fom_run(case, _days(args.days), args.jobs, args.force)
        elif args.command == "pod":
            pod_stage(case, args.role, args.n, rank_tol=args.rank_tol, force=args.force)
        elif args.command == "deim-build":
            deim_stage(case, args.n_deim, args.force)
        elif args.command == "train-flux-nn":
            if args.seed is not None:
                case.config.data["nn"]["seed"] = args.seed
            train_stage(case, args.force, args.epochs)
        elif args.command == "rom-build":
            rom_build(case, *_sizes(case, args), force=args.force)
        elif args.command == "rom-run":
            n_rb, n_deim, n_phi = _sizes(case, args)
            rom_run(case, n_rb, n_deim, n_phi, _days(args.days), args.source_path, args.flux,
                    args.jobs, args.force)
        elif args.command == "evaluate":
            models = None
            if args.n_rb or args.n_deim or args.n_phi:
                n_rb, n_deim, n_phi = _sizes(case, args)
                models = [(n_phi, n_deim, n_rb)]
            evaluate_case(case, models, _days(args.days), (args.source_path,), args.flux,
                          args.jobs, args.force)
        elif args.command == "run-all":
            run_all(case, args.jobs, args.force)
        return 0
    except (CaseError, ConfigError, CorruptFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
