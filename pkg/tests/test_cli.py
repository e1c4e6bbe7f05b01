import csv
import glob
import json
import os
import subprocess
import sys

import pytest

from qcdkit.cli import main
from qcdkit.experiments import ConfigError, ResultTable, config_hash, resolve_config, validate_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

SMALL = {
    "experiment": "custom",
    "seed": 3,
    "replications": 60,
    "arl": 50,
    "nu": 1,
    "tolerance": 0.1,
    "model": {"K": 1, "mu": 0.5},
    "detectors": [{"name": "cusum", "kind": "cusum", "params": {"theta": 0.5}},
                  {"name": "sr", "kind": "sr"}],
}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_shipped_configs_validate():
    files = glob.glob(os.path.join(ROOT, "configs", "*.json"))
    assert files
    for f in files:
        assert main(["validate-config", f]) == 0


def test_validate_config_rejects_unknown_keys(tmp_path, capsys):
    bad = dict(SMALL, colour="red")
    assert main(["validate-config", _write(tmp_path / "bad.json", bad)]) == 2
    assert "colour" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        validate_config({"experiment": "fig9"})
    with pytest.raises(ConfigError):
        validate_config(dict(SMALL, detectors=[{"kind": "cusum", "params": {"beta": 2}}]))
    with pytest.raises(ConfigError):
        validate_config({"experiment": "custom"})


def test_unreadable_config_is_a_config_error(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["validate-config", str(p)]) == 2
    assert main(["validate-config", str(tmp_path / "missing.json")]) == 2


def test_resolve_config_overrides_and_defaults():
    cfg = resolve_config({"experiment": "fig2"}, scale="desk", seed=5, reps=7)
    assert cfg["model"]["K"] == 50 and cfg["replications"] == 7 and cfg["seed"] == 5
    assert cfg["L_grid"] == [1, 12, 25, 50]
    paper = resolve_config({"experiment": "fig2"})
    assert paper["model"]["K"] == 100 and paper["L_grid"] == [1, 25, 50, 100]
    assert resolve_config({"experiment": "fig1b"}, scale="desk")["gammas"] == [100.0, 300.0]
    assert resolve_config({"experiment": "fig1b"})["gammas"] == [100.0, 300.0, 1000.0]


def test_run_writes_reproducible_outputs(tmp_path):
    cfg_dir = tmp_path / "cfg"
    cfg_dir.mkdir()
    cfg = _write(cfg_dir / "small.json", SMALL)
    before = (cfg_dir / "small.json").read_text()
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "custom", "--config", cfg, "--out", str(a)]) == 0
    assert main(["run", "custom", "--config", cfg, "--out", str(b)]) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert (cfg_dir / "small.json").read_text() == before

    with open(a / "results.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    h = config_hash(resolve_config(SMALL))
    assert all(r["seed"] == "3" and r["config_hash"] == h for r in rows)
    # full-precision decimals survive a round trip
    for r in rows:
        assert repr(float(r["estimate"])) == r["estimate"]
    meta = json.loads((a / "metadata.json").read_text())
    assert meta["config"]["seed"] == 3 and "numpy" in meta["versions"]
    assert "results.csv" in (a / "plot_custom.py").read_text()


def test_run_refuses_to_write_next_to_config(tmp_path):
    cfg = _write(tmp_path / "small.json", SMALL)
    assert main(["run", "custom", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_run_rejects_mismatched_experiment(tmp_path):
    cfg = _write(tmp_path / "small.json", SMALL)
    assert main(["run", "fig1a", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_seed_override_changes_table(tmp_path):
    cfg = _write(tmp_path / "small.json", SMALL)
    assert main(["run", "custom", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "custom", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() != (tmp_path / "b" / "results.csv").read_bytes()


def test_fdr_subcommand(tmp_path, capsys):
    doc = {"experiment": "fdr", "replications": 40, "model": {"K": 5, "mu": 0.5},
           "fdr": {"rho": 0.02, "alphas": [0.2, 1.0], "horizon": 300, "n_grid": [50, 100]}}
    cfg = _write(tmp_path / "fdr.json", doc)
    out = tmp_path / "out"
    assert main(["fdr", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["parameter"] for r in rows} == {"fdr_n", "fnr_n"}
    assert sorted({int(r["value"]) for r in rows}) == [50, 100, 300]
    with open(out / "replications.csv", newline="") as fh:
        reps = list(csv.DictReader(fh))
    # alpha = 1 stops every stream at tick 1
    first = [r for r in reps if r["alpha"] == "1.0" and r["replication"] != "summary"]
    assert len(first) == 40 and all(r["R"] == "5" for r in first)
    summary = json.loads(capsys.readouterr().out)
    assert summary["experiment"] == "fdr"


def test_calibrate_subcommand(tmp_path, capsys):
    cache = tmp_path / "cal.jsonl"
    args = ["calibrate", "cusum", "--param", "theta=0.5", "--arl", "100", "--reps", "200", "--cache", str(cache)]
    assert main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert abs(first["arl"] / 100 - 1) <= 0.05
    assert main(args) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert cache.read_text().count("\n") == 1


def test_calibration_failure_exit_code(capsys):
    assert main(["calibrate", "xs", "--K", "2", "--arl", "200", "--horizon", "50", "--reps", "20"]) == 3
    assert "calibration failed" in capsys.readouterr().err


def test_bad_parameter_exit_code():
    assert main(["calibrate", "cusum", "--param", "colour=1", "--reps", "20"]) == 2
    assert main(["calibrate", "cusum", "--param", "theta", "--reps", "20"]) == 2


def test_console_entry_point(tmp_path):
    cfg = _write(tmp_path / "small.json", SMALL)
    proc = subprocess.run([sys.executable, "-m", "qcdkit.cli", "validate-config", cfg],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "ok" in proc.stdout


def test_result_table_csv_format():
    t = ResultTable("custom", 1, "abc")
    t.add("d", "nu", 1, 0.1 + 0.2, 1 / 3, 10, 2.5)
    text = t.to_csv()
    lines = text.split("\r\n")
    assert lines[0].startswith("experiment,detector,parameter")
    assert "0.30000000000000004" in lines[1] and "0.3333333333333333" in lines[1]
    assert text.count("\r\n") == 2
