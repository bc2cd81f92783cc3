from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from flusmc import checkpoint as ckpt
from flusmc.cli import THREADS_ENV, main, resolve_threads


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_help_lists_subcommands():
    res = subprocess.run([sys.executable, "-m", "flusmc.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("simulate", "mcmc", "smc", "compare", "diagnose", "forecast", "pipeline"):
        assert cmd in res.stdout


def test_dry_run_prints_plan(capsys):
    assert main(["pipeline", "--dry-run", "--landmarks", "50,83,120", "--kl-days", "100"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["intervals"] == [[50, 83], [83, 120]]
    assert plan["mcmc_days"] == [50, 83, 100, 120]


def test_thread_resolution(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(1) == 1
    monkeypatch.delenv(THREADS_ENV)
    assert resolve_threads(None) is None


def test_error_exit_codes(tmp_path, capsys, monkeypatch):
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["simulate", "--scenario", "9"]) == 2
    assert main(["pipeline", "--dry-run", "--landmarks", "90,50"]) == 1
    monkeypatch.setenv(THREADS_ENV, "many")
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_end_to_end_subcommands(workdir, capsys):
    d = workdir
    assert main(["simulate", "--seed", "1", "--out", str(d / "data")]) == 0
    assert (d / "data" / "truth.json").exists()
    data = str(d / "data" / "data.csv")
    assert main(["mcmc", "--data", data, "--day", "50,55", "--iters", "3000", "--thin", "5",
                 "--seed", "2", "--out", str(d / "mcmc")]) == 0
    post = rows(d / "mcmc" / "posterior.csv")
    assert {r["day"] for r in post} == {"50", "55"}
    assert main(["smc", "--data", data, "--init-mcmc", str(d / "mcmc"), "--start-day", "50", "--last-day", "55",
                 "--particles", "200", "--seed", "3", "--out", str(d / "smc")]) == 0
    steps = rows(d / "smc" / "step_report.csv")
    assert [int(r["day"]) for r in steps] == [51, 52, 53, 54, 55]
    assert all(int(r["n_evals"]) >= 0 for r in steps)
    ps, meta = ckpt.load(d / "smc" / "checkpoint.bin")
    assert ps.t_index == 55 and ps.n == 200 and meta["scenario"] == "1"
    assert main(["compare", "--smc", str(d / "smc"), "--mcmc", str(d / "mcmc"), "--out", str(d / "cmp")]) == 0
    kl = rows(d / "cmp" / "kl_by_day.csv")
    assert [r["day"] for r in kl] == ["55"] and float(kl[0]["kl"]) >= 0
    assert main(["diagnose", "--run", str(d / "smc"), "--out", str(d / "diag")]) == 0
    assert (d / "diag" / "pit_hist.csv").exists() and (d / "diag" / "scores.csv").exists()
    assert main(["forecast", "--checkpoint", str(d / "smc" / "checkpoint.bin"), "--horizon", "4",
                 "--out", str(d / "fc")]) == 0
    fc = rows(d / "fc" / "forecast_bands.csv")
    assert {int(r["day"]) for r in fc} == {56, 57, 58, 59}
    for r in fc:
        assert float(r["q0.025"]) <= float(r["q0.5"]) <= float(r["q0.975"])
    # resuming from the checkpoint continues at the next day
    assert main(["smc", "--data", data, "--resume", str(d / "smc" / "checkpoint.bin"), "--last-day", "57",
                 "--particles", "200", "--seed", "3", "--out", str(d / "smc2")]) == 0
    assert [int(r["day"]) for r in rows(d / "smc2" / "step_report.csv")] == [56, 57]
    assert main(["smc", "--data", data, "--init-mcmc", str(d / "mcmc"), "--start-day", "40",
                 "--out", str(d / "bad")]) == 2
