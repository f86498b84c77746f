import json

import pytest

from coefid import cli, fem


def _run(tmp_path, *argv):
    return cli.main([*argv, "--out", str(tmp_path)])


def _only_run_dir(tmp_path, command):
    dirs = sorted(tmp_path.glob(f"{command}-*"))
    assert len(dirs) == 1
    return dirs[0]


def _strip_runtime(path):
    data = json.loads(path.read_text())
    data.pop("runtime_seconds", None)
    return data


def test_forward_outputs(tmp_path, capsys):
    assert _run(tmp_path, "forward", "--problem", "1d-affine-a", "--cells", "64") == 0
    d = _only_run_dir(tmp_path, "forward")
    errors = json.loads((d / "errors.json").read_text())
    assert errors["l2_error"] < 1e-3
    assert (d / "solution.csv").read_text().startswith("node_index,x,value")
    assert json.loads((d / "config.json").read_text())["cells"] == 64
    assert "L2 error" in capsys.readouterr().out


def test_config_errors_exit_2(tmp_path):
    assert _run(tmp_path, "forward", "--problem", "no-such-problem") == 2
    assert _run(tmp_path, "reconstruct", "--scheme", "mixed", "--noise-mode", "nodal") == 2
    assert _run(tmp_path, "lmm", "--family", "ab", "--M", "9") == 2
    assert _run(tmp_path, "forward", "--config", str(tmp_path / "missing.ini")) == 2
    assert _run(tmp_path, "reconstruct", "--bogus") == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[forward]\nmesh_size = 3\n")
    assert _run(tmp_path, "forward", "--config", str(bad)) == 2
    assert _run(tmp_path, "--help") == 0


def test_numerical_failure_exit_1(tmp_path, monkeypatch):
    def fail(*args, **kwargs):
        raise fem.SolverError("no convergence", 7)

    monkeypatch.setattr(cli.fem, "solve_dirichlet", fail)
    assert _run(tmp_path, "forward", "--cells", "8") == 1


def test_reconstruct_is_deterministic(tmp_path):
    argv = ["reconstruct", "--problem", "1d-smooth-a", "--scheme", "hybrid", "--delta", "0.01", "--steps", "30"]
    assert _run(tmp_path / "a", *argv) == 0
    assert _run(tmp_path / "b", *argv) == 0
    da, db = _only_run_dir(tmp_path / "a", "reconstruct"), _only_run_dir(tmp_path / "b", "reconstruct")
    assert da.name == db.name
    assert _strip_runtime(da / "result.json") == _strip_runtime(db / "result.json")
    assert (da / "coefficient.csv").read_bytes() == (db / "coefficient.csv").read_bytes()
    assert (da / "train_log.csv").exists()


def test_fem_reconstruct_outputs(tmp_path):
    assert _run(tmp_path, "reconstruct", "--problem", "1d-const", "--delta", "0.01") == 0
    d = _only_run_dir(tmp_path, "reconstruct")
    res = json.loads((d / "result.json").read_text())
    assert 0.5 <= res["coefficient_min"] <= res["coefficient_max"] <= 2.0
    assert res["cells"] == 8 and res["gamma"] == pytest.approx(1e-4)
    assert (d / "iterations.csv").read_text().startswith("iteration,loss")


@pytest.mark.parametrize("fmt", ["ini", "json"])
def test_config_file_and_flag_precedence(tmp_path, fmt):
    if fmt == "ini":
        text = "seed = 5\n[forward]\nproblem = 2d-sine\ncells = 4\n"
    else:
        text = json.dumps({"seed": 5, "forward": {"problem": "2d-sine", "cells": 4}})
    path = tmp_path / f"cfg.{fmt}"
    path.write_text(text)
    out = tmp_path / "runs"
    assert cli.main(["forward", "--config", str(path), "--cells", "8", "--out", str(out)]) == 0
    cfg = json.loads((_only_run_dir(out, "forward") / "config.json").read_text())
    assert (cfg["problem"], cfg["cells"], cfg["seed"], cfg["quad_level"]) == ("2d-sine", 8, 5, 2)


def test_lmm_command(tmp_path):
    assert _run(tmp_path / "s", "lmm", "--family", "am", "--M", "2", "--stability-only") == 0
    d = _only_run_dir(tmp_path / "s", "lmm")
    rep = json.loads((d / "stability.json").read_text())
    assert rep["stable"] is False and rep["scheme"] == "AM2"
    assert not (d / "trajectory.csv").exists()
    assert _run(tmp_path / "r", "lmm", "--family", "ab", "--M", "3", "--h", "0.05") == 0
    d = _only_run_dir(tmp_path / "r", "lmm")
    rep = json.loads((d / "stability.json").read_text())
    assert rep["stable"] and rep["max_error"] < 1e-3 and rep["N"] == 20
    assert (d / "recovery.csv").exists() and (d / "trajectory.csv").exists()


def test_study_command(tmp_path, capsys):
    assert _run(tmp_path / "one", "study", "--problem", "1d-const", "--deltas", "0.01", "--trials", "1") == 0
    assert "slope n/a" in capsys.readouterr().out
    assert _run(tmp_path / "lmm", "study", "--scheme", "lmm", "--deltas", "0.1,0.05,0.025,0.0125",
                "--trials", "1", "--lmm-family", "ab", "--lmm-M", "2") == 0
    summary = json.loads((_only_run_dir(tmp_path / "lmm", "study") / "summary.json").read_text())
    assert summary["pass"] and abs(summary["slope"] - 2) < 0.3
    assert _run(tmp_path / "bad", "study", "--deltas", "0.01,0.1") == 2
