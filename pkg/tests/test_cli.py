"""CLI and config behaviour: exit codes, validation anchoring, report
determinism, file formats, figure rendering.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from graphmfg.cli import main
from graphmfg.config import ConfigError, load_config

FAST_NUMERICS = {"tol": 1e-9, "seed": 42, "n_steps": 256, "mc_paths": 4000,
                 "master_points": 1, "hjb_chords": 2, "direct_grid": 128}


def write_config(tmp_path, name="cfg.json", **overrides):
    cfg = {
        "graph": {"generator": "cycle", "params": {"n": 4}},
        "model": {"family": "quadratic"},
        "horizon": 1.0,
        "initials": [{"t": 0.0, "mu": [0.4, 0.3, 0.2, 0.1]}],
        "suites": ["mfg"],
        "numerics": dict(FAST_NUMERICS),
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=1))
    return path


def test_validate_ok(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["validate", str(path)]) == 0
    out = capsys.readouterr().out
    assert "OK" in out and "n=4" in out


def test_validate_shipped_configs():
    for name in ("c4_quadratic.json", "c4_extended.json", "k2_power.json"):
        cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / name)
        assert cfg.graph.n >= 2


def test_malformed_weight_names_edge(tmp_path, capsys):
    path = write_config(tmp_path, graph={
        "n": 3, "edges": [[1, 2, 1.0], [2, 3, -2.0], [3, 1, 1.0]]})
    assert main(["validate", str(path)]) == 2
    err = capsys.readouterr().err
    assert "edges[1]" in err and "weight" in err
    # the message is anchored at the offending line of the file
    assert any(f"{path}:{k}:" in err for k in range(1, 20))


def test_missing_seed_with_nash_suite(tmp_path, capsys):
    numerics = dict(FAST_NUMERICS)
    numerics.pop("seed")
    path = write_config(tmp_path, suites=["nash"], numerics=numerics)
    assert main(["run", str(path)]) == 2
    assert "seed" in capsys.readouterr().err


def test_invalid_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n "graph": {,}\n}\n')
    assert main(["validate", str(path)]) == 2
    err = capsys.readouterr().err
    assert f"{path}:2" in err


def test_bad_mu_rejected(tmp_path, capsys):
    path = write_config(tmp_path, initials=[{"t": 0.0, "mu": [0.5, 0.5, 0.0, 0.0]}])
    assert main(["validate", str(path)]) == 2
    assert "initials" in capsys.readouterr().err


def test_unknown_suite_rejected(tmp_path, capsys):
    path = write_config(tmp_path, suites=["mfg", "plotting"])
    assert main(["validate", str(path)]) == 2
    assert "unknown suite" in capsys.readouterr().err


def test_list_generators(capsys):
    assert main(["list-generators"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert set(data) == {"path", "cycle", "complete", "torus"}


def test_run_writes_reports_and_figures(tmp_path, capsys):
    path = write_config(tmp_path, suites=["interiority", "mfg"])
    assert main(["run", str(path)]) == 0
    out = Path(tmp_path / "out")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["all_passed"]
    assert set(summary["suites"]) == {"interiority", "mfg"}
    assert (out / "interiority.json").exists()
    assert (out / "mfg.json").exists()
    assert (out / "mfg_solution.csv").exists()
    assert (out / "metadata.json").exists()
    assert (out / "config.json").exists()
    figures = list((out / "figures").glob("*.png"))
    assert len(figures) >= 3
    stdout = capsys.readouterr().out
    assert "[PASS] suite interiority" in stdout


def test_run_suite_filter(tmp_path):
    path = write_config(tmp_path, suites=["interiority", "mfg"])
    assert main(["run", str(path), "--suite", "interiority"]) == 0
    out = Path(tmp_path / "out")
    assert (out / "interiority.json").exists()
    assert not (out / "mfg.json").exists()


def test_run_suite_filter_disjoint(tmp_path, capsys):
    path = write_config(tmp_path, suites=["mfg"])
    assert main(["run", str(path), "--suite", "interiority"]) == 2
    assert "none of" in capsys.readouterr().err


def test_out_override_and_jobs(tmp_path):
    path = write_config(tmp_path)
    alt = tmp_path / "alt"
    assert main(["run", str(path), "--out", str(alt), "--jobs", "2"]) == 0
    assert (alt / "summary.json").exists()


def test_reports_byte_identical_across_runs(tmp_path):
    """Same config + seed must reproduce every JSON report byte for byte
    (timestamps live in metadata.json only)."""
    path = write_config(tmp_path, suites=["interiority", "mfg"])
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    assert main(["run", str(path), "--out", str(out1)]) == 0
    assert main(["run", str(path), "--out", str(out2)]) == 0
    for name in ("summary.json", "interiority.json", "mfg.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    csv1 = (out1 / "mfg_solution.csv").read_bytes()
    assert csv1 == (out2 / "mfg_solution.csv").read_bytes()


def test_csv_seventeen_digit_roundtrip(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", str(path)]) == 0
    csv_path = tmp_path / "out" / "mfg_solution.csv"
    lines = csv_path.read_text().strip().splitlines()
    row = lines[3].split(",")
    vals = [float(x) for x in row[1:]]
    # 17 significant digits reload bit-faithfully
    refmt = [f"{v:.17g}" for v in vals]
    assert refmt == row[1:]
    assert all(float(r) == v for r, v in zip(refmt, vals))


def test_failing_suite_exits_one(tmp_path, monkeypatch):
    import graphmfg.suites as suites_mod

    def fake_suite(cfg, out):
        return {"suite": "mfg", "passed": False, "n_checks": 1,
                "checks": [{"name": "boom", "value": 1.0, "passed": False,
                            "soft": False}]}

    monkeypatch.setitem(suites_mod.SUITE_RUNNERS, "mfg", fake_suite)
    path = write_config(tmp_path)
    assert main(["run", str(path)]) == 1
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["suites"]["mfg"]["failures"] == ["boom"]


def test_config_defaults_roundtrip(tmp_path):
    path = write_config(tmp_path, suites="all")
    cfg = load_config(path)
    assert cfg.suites == ["interiority", "mfg", "master", "hjb", "nash"]
    assert cfg.numerics["mc_paths"] == 4000
    assert cfg.nash_options["torus_sweep"] is None
    spec = cfg.build_spec()
    assert spec.n == 4 and spec.horizon == 1.0


def test_explicit_graph_config(tmp_path):
    path = write_config(tmp_path, graph={
        "n": 3, "edges": [[1, 2, 1.0], [2, 3, 2.0], [3, 1, 0.5]]},
        initials=[{"t": 0.0, "mu": [0.5, 0.3, 0.2]}])
    cfg = load_config(path)
    assert cfg.graph.omega_min == 0.5
    assert cfg.graph.omega[1, 2] == 2.0
