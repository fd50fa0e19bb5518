import csv
import hashlib
import json
import subprocess
import sys

import pytest

from lbgm import cli, simstudy
from lbgm.simstudy import Replication, SimulationDesign, benchmark_design

import numpy as np


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("design", "--out", root / "design.json", "--n", 250, "--waves", "six") == 0
    assert run("generate", "--design", root / "design.json", "--seed", 3, "--out", root / "gen") == 0
    return root


@pytest.fixture(scope="module")
def fitted(dataset):
    out = dataset / "fit"
    assert run("fit", "--data", dataset / "gen/data.csv", "--spec", dataset / "gen/spec.json",
               "--out", out) == 0
    return out


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_fit_writes_all_outputs(fitted):
    for name in ("parameter_table.csv", "derived_report.csv", "trajectory.csv", "fit_summary.json"):
        assert (fitted / name).stat().st_size > 0
    summary = json.loads((fitted / "fit_summary.json").read_text())
    assert summary["status"] == "Converged" and summary["n"] == 250
    with (fitted / "trajectory.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["kind"] for r in rows} >= {"observed", "implied"}


def test_fit_is_reproducible(dataset, fitted, tmp_path):
    assert run("fit", "--data", dataset / "gen/data.csv", "--spec", dataset / "gen/spec.json",
               "--out", tmp_path) == 0
    for name in ("parameter_table.csv", "derived_report.csv", "trajectory.csv"):
        assert digest(tmp_path / name) == digest(fitted / name)


def test_generate_is_reproducible(dataset, tmp_path):
    assert run("generate", "--design", dataset / "design.json", "--seed", 3, "--out", tmp_path) == 0
    assert digest(tmp_path / "data.csv") == digest(dataset / "gen/data.csv")


def test_report_layout(fitted, capsys):
    assert run("report", "--out", fitted) == 0
    text = capsys.readouterr().out
    assert text == (fitted / "report.txt").read_text()
    for needle in ("Rate of Interval 1", "Rate of Interval 5", "Covariance", "Initial Status",
                   "Change from baseline", "Estimate (SE)", "P value"):
        assert needle in text
    # the change at the first wave is fixed at zero, so its test is unavailable
    assert "unavailable" in text


def test_report_without_fit_fails(tmp_path, capsys):
    assert run("report", "--out", tmp_path) == 1
    assert "missing fit output" in capsys.readouterr().err


def test_unknown_outcome_label_is_named(dataset, tmp_path, capsys):
    spec = json.loads((dataset / "gen/spec.json").read_text())
    spec["outcomes"][1]["label"] = "w"
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert run("fit", "--data", dataset / "gen/data.csv", "--spec", tmp_path / "spec.json",
               "--out", tmp_path / "o") == 1
    assert "'w'" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_data_exits_one(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("id,outcome,wave,time,value\n1,y,1,0.0,abc\n")
    assert run("fit", "--data", tmp_path / "d.csv", "--out", tmp_path / "o") == 1
    assert "error" in capsys.readouterr().err


def test_drop_values_marks_sentinels_missing(dataset, tmp_path):
    lines = (dataset / "gen/data.csv").read_text().splitlines()
    head, body = lines[0], lines[1:]
    cols = head.split(",")
    vi = cols.index("value")
    row = body[7].split(",")
    row[vi] = "-999"
    body[7] = ",".join(row)
    (tmp_path / "d.csv").write_text("\n".join([head] + body) + "\n")
    assert run("fit", "--data", tmp_path / "d.csv", "--out", tmp_path / "o", "--drop-values", "-999") == 0
    assert json.loads((tmp_path / "o/fit_summary.json").read_text())["dropped_rows"] == 1


def test_missing_waves_for_z_fit_with_tied_rates(tmp_path, capsys):
    assert run("design", "--out", tmp_path / "d.json", "--n", 300, "--missing-z", "1,3,5") == 0
    assert run("generate", "--design", tmp_path / "d.json", "--seed", 1, "--out", tmp_path / "g") == 0
    # default spec: the shape factor sits on the first interval z actually spans
    assert run("fit", "--data", tmp_path / "g/data.csv", "--out", tmp_path / "f") == 0
    summary = json.loads((tmp_path / "f/fit_summary.json").read_text())
    z = next(o for o in summary["spec"]["outcomes"] if o["label"] == "z")
    assert z["fixed_interval"] == 2
    with (tmp_path / "f/parameter_table.csv").open() as fh:
        names = [r["parameter"] for r in csv.DictReader(fh)]
    assert any(n.startswith("z.gamma") and "-" in n for n in names)
    assert run("report", "--out", tmp_path / "f") == 0
    assert "---" in capsys.readouterr().out


def test_invalid_design_exits_one(tmp_path, capsys):
    assert run("design", "--out", tmp_path / "d.json", "--waves", "unequal") == 1
    assert "delta" in capsys.readouterr().err
    assert run("design", "--out", tmp_path / "d.json", "--waves", "unequal", "--delta", 0.2) == 0


def test_simulate_small_study(tmp_path, capsys):
    assert run("design", "--out", tmp_path / "d.json", "--n", 150, "--waves", "six") == 0
    assert run("simulate", "--design", tmp_path / "d.json", "--reps", 10, "--seed", 5,
               "--out", tmp_path / "s", "--workers", 1) == 0
    assert "convergence rate: 1.0000" in capsys.readouterr().out
    with (tmp_path / "s/metric_report.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {r["parameter"] for r in rows} >= {"y.mu_eta1", "z.gamma5"}
    assert all(0 <= float(r["coverage"]) <= 1 for r in rows)


def test_simulate_cap_exits_three(tmp_path, monkeypatch, capsys):
    def mostly_failing(design, options, seed, attempt, level):
        est = np.ones(1)
        status = "Converged" if attempt == 0 else "RetriesExhausted"
        return Replication(attempt, status, 0, est, est, np.array([[0.0, 2.0]])), ("a",), np.ones(1)

    real = simstudy.run_study
    monkeypatch.setattr(cli, "run_study", lambda *a, **k: real(*a, runner=mostly_failing, **k))
    benchmark_design(n=10).save(tmp_path / "d.json")
    assert run("simulate", "--design", tmp_path / "d.json", "--reps", 4, "--out", tmp_path / "s",
               "--workers", 1) == 3
    assert "partial" in capsys.readouterr().err


def test_simulate_with_no_converged_fit_exits_three(tmp_path, monkeypatch, capsys):
    def failing(design, options, seed, attempt, level):
        est = np.zeros(1)
        return Replication(attempt, "RetriesExhausted", 10, est, est, np.zeros((1, 2))), ("a",), np.ones(1)

    real = simstudy.run_study
    monkeypatch.setattr(cli, "run_study", lambda *a, **k: real(*a, runner=failing, **k))
    benchmark_design(n=10).save(tmp_path / "d.json")
    assert run("simulate", "--design", tmp_path / "d.json", "--reps", 2, "--out", tmp_path / "s",
               "--workers", 1) == 3
    assert "none of 6 attempts converged" in capsys.readouterr().err


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lbgm.cli", "design", "--out", str(tmp_path / "d.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "d.json").exists()
