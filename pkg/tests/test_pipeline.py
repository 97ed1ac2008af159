import builtins
import io
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from urbanrom.config import (
    ConfigError,
    ExperimentConfig,
    WindSchedule,
    load_config,
    preset,
    read_wind_csv,
    synthesize_wind_day,
    write_wind_csv,
)
from urbanrom.pipeline import Case, _rom_day, main, model_name, pod_stage
from urbanrom.storage import CorruptFileError, read_matrix

METRICS = ("err_prj.csv", "deim_error.csv", "daily_err_rb.csv", "err_rb_series.csv",
           "models.csv", "worst_field.csv", "worst_field.json")


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_case(tmp_path_factory):
    root = tmp_path_factory.mktemp("cases") / "small"
    assert _run("generate-case", "--case", root, "--config", "small") == 0
    assert _run("run-all", "--case", root) == 0
    return root


def test_presets_validate():
    for name in ("small", "desk", "full"):
        cfg = preset(name)
        assert not set(cfg.train_days) & set(cfg.test_days)
    full = preset("full")
    assert full.all_days == list(range(325))


def test_overlapping_days_rejected(tmp_path):
    with pytest.raises(ConfigError, match="overlap"):
        preset("small", days={"train": [0, 1], "test": [1]})
    cfg = tmp_path / "bad.toml"
    cfg.write_text('[case]\nbase = "small"\n[days]\ntrain = [0, 1]\ntest = [1, 2]\n')
    with pytest.raises(ConfigError):
        load_config(cfg)
    assert _run("generate-case", "--case", tmp_path / "c", "--config", cfg) == 2
    assert not (tmp_path / "c").exists()


def test_config_checks():
    with pytest.raises(ConfigError, match="split"):
        preset("small", nn={"split": 1.0})
    with pytest.raises(ConfigError, match="multiple"):
        preset("small", fom={"record_every": 150.0})
    with pytest.raises(ConfigError):
        preset("nope")


def test_shipped_configs_match_presets():
    cfg_dir = Path(__file__).resolve().parents[1] / "configs"
    for name in ("small", "desk", "full"):
        assert load_config(cfg_dir / f"{name}.toml").data == preset(name).data


def test_wind_day_independent_streams(tmp_path):
    w = preset("desk").data["wind"]
    t, mu1, mu2 = synthesize_wind_day(7, 3, w)
    t2, mu1b, mu2b = synthesize_wind_day(7, 3, w)
    assert np.array_equal(mu1, mu1b) and np.array_equal(mu2, mu2b)
    assert t.size == 25 and np.all((mu2 >= 0) & (mu2 < 2 * np.pi))
    write_wind_csv(tmp_path / "w.csv", t, mu1, mu2)
    back = read_wind_csv(tmp_path / "w.csv")
    assert np.array_equal(back.mu1, mu1)


def test_wind_vector_interpolation():
    w = WindSchedule(np.array([0.0, 3600.0]), np.array([2.0, 2.0]),
                     np.array([np.deg2rad(350.0), np.deg2rad(10.0)]))
    mid = w.encoded(1800.0)
    # the interpolated direction passes through 0, not through 180 degrees
    assert mid[0] > 1.9 and abs(mid[1]) < 1e-12


def test_outputs_and_formats(small_case):
    for name in METRICS + ("speedup.csv",):
        assert (small_case / "metrics" / name).exists()
    for path in small_case.rglob("*.rmdm"):
        read_matrix(path)
    cfg = json.loads((small_case / "config.json").read_text())
    assert cfg["days"] == {"test": [2], "train": [0, 1]}
    lines = (small_case / "metrics" / "models.csv").read_text().splitlines()
    assert lines[0] == "model,n_phi,n_deim,n_rb,source_path,mean_err_rb"
    assert len(lines) == 1 + 2


def test_rerun_is_up_to_date(small_case, capsys):
    capsys.readouterr()
    assert _run("rom-build", "--case", small_case, "--n-rb", 10, "--n-deim", 5, "--n-phi", 5) == 0
    out = capsys.readouterr().out
    assert out.strip() == "rom-build:phi5_deim5_rb10: up-to-date"
    assert _run("run-all", "--case", small_case) == 0
    out = capsys.readouterr().out
    stages = [line for line in out.splitlines() if ": " in line and "Err_rb" not in line]
    assert stages and all(line.endswith("up-to-date") for line in stages)


def test_missing_case_reports_error(tmp_path, capsys):
    assert _run("fom-run", "--case", tmp_path / "none") == 2
    assert "not a case" in capsys.readouterr().err


def test_corrupt_file_is_an_error(small_case, tmp_path, capsys):
    root = tmp_path / "copy"
    shutil.copytree(small_case, root)
    target = root / "fom" / "day_000.rmdm"
    data = bytearray(target.read_bytes())
    data[40] ^= 0x01
    target.write_bytes(bytes(data))
    with pytest.raises(CorruptFileError):
        read_matrix(target)
    capsys.readouterr()
    assert _run("fom-run", "--case", root) == 2
    assert "corrupt" in capsys.readouterr().err
    # never silently regenerated
    assert target.read_bytes() == bytes(data)


def test_deim_run_reads_no_full_order_data(small_case, monkeypatch):
    opened = []
    real_open = builtins.open
    real_io_open = io.open

    def spy(file, *args, **kwargs):
        opened.append(str(file))
        return real_open(file, *args, **kwargs)

    def spy_io(file, *args, **kwargs):
        opened.append(str(file))
        return real_io_open(file, *args, **kwargs)

    real_path_open = Path.open

    def spy_path(self, *args, **kwargs):
        opened.append(str(self))
        return real_path_open(self, *args, **kwargs)

    monkeypatch.setattr(builtins, "open", spy)
    monkeypatch.setattr(io, "open", spy_io)
    monkeypatch.setattr(Path, "open", spy_path)
    name = model_name(5, 5, 10)
    _rom_day((str(small_case), name, 2, "deim", "nn", 1))
    monkeypatch.undo()
    rel = sorted({p.replace(str(small_case) + "/", "") for p in opened})
    rom = f"rom/{name}/"
    for needed in ("M_r.rmdm", "Gamma.rmdm", "deim_points.rmdm", "source_points.rmdm"):
        assert rom + needed in rel
    assert any(p.startswith("nn/") for p in rel)
    forbidden = ("fom/", "pod/", "emission.csv", "grid.csv", "deim/")
    assert not [p for p in rel if p.startswith(forbidden)]
    full_rom = ("Phi.rmdm", "Psi.rmdm", "deim_U.rmdm", "Phi_weights.rmdm")
    assert not [p for p in rel if p.endswith(full_rom)]


def test_full_rank_evaluate(small_case, tmp_path):
    root = tmp_path / "oracle"
    shutil.copytree(small_case, root)
    case = Case(root)
    pod_stage(case, "concentration", 1000, rank_tol=1e-15)
    pod_stage(case, "flux", 1000, rank_tol=1e-15)
    case = Case(root)
    n_rb = case.basis("concentration").n_modes
    n_phi = case.basis("flux").n_modes
    argv = ["evaluate", "--case", root, "--n-rb", n_rb, "--n-phi", n_phi, "--n-deim", 10,
            "--days", "0", "--source-path", "projection", "--flux", "exact"]
    assert _run(*argv) == 0
    lines = (root / "metrics" / "models.csv").read_text().splitlines()
    err = float(lines[1].split(",")[-1])
    assert err <= 1e-6
    assert (root / "metrics" / "speedup.csv").exists()


def test_deterministic_metrics(small_case, tmp_path):
    other = tmp_path / "again"
    assert _run("generate-case", "--case", other, "--config", "small") == 0
    assert _run("run-all", "--case", other) == 0
    for name in METRICS:
        assert (other / "metrics" / name).read_bytes() == (small_case / "metrics" / name).read_bytes()


def test_config_seed_override(tmp_path):
    assert _run("generate-case", "--case", tmp_path / "s", "--config", "small", "--seed", 99) == 0
    assert json.loads((tmp_path / "s" / "config.json").read_text())["case"]["seed"] == 99
    cfg = ExperimentConfig(json.loads((tmp_path / "s" / "config.json").read_text()))
    assert cfg.seed == 99
