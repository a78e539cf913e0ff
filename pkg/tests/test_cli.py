import json

import numpy as np
import pytest

from msimrt import cli
from msimrt import pipeline as pl

from conftest import tiny_spec


@pytest.fixture
def case_file(tmp_path):
    cfg = pl.RunConfig(case=tiny_spec(), F=2, P=3, voxel_rate=0.5, n_sim=20, seed=1, sddp={"max_iters": 8})
    path = tmp_path / "case.yaml"
    cfg.save(path)
    return str(path)


def run(argv):
    return cli.main([str(a) for a in argv])


def test_evaluate_writes_run_directory(case_file, tmp_path):
    out = tmp_path / "out"
    assert run(["evaluate", "--case", case_file, "--out", out]) == 0
    base = out / "tiny" / "stoch_worst_m0"
    for rel in ("config.yaml", "policy/policy.json", "policy/train_report.json", "traces/traces.csv",
                "traces/doses.dose", "reports/report.json", "reports/report.txt", "reports/dvh_Tumor_0.csv"):
        assert (base / rel).exists(), rel


def test_plan_then_simulate(case_file, tmp_path):
    out = tmp_path / "out"
    assert run(["plan", "--case", case_file, "--out", out]) == 0
    assert run(["simulate", "--case", case_file, "--out", out]) == 0
    rep = json.loads((out / "tiny" / "stoch_worst_m0" / "reports" / "report.json").read_text())
    assert rep["n_runs"] == 20


def test_deterministic_plan_then_simulate(case_file, tmp_path):
    out = tmp_path / "out"
    assert run(["plan", "--case", case_file, "--margin", "ptv", "--out", out]) == 0
    assert (out / "tiny" / "det_m2" / "policy" / "plan.json").exists()
    assert run(["simulate", "--case", case_file, "--margin", "ptv", "--out", out]) == 0


def test_compare_two_reports(case_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(["evaluate", "--case", case_file, "--out", out]) == 0
    assert run(["evaluate", "--case", case_file, "--deterministic", "--out", out]) == 0
    a = out / "tiny" / "stoch_worst_m0" / "reports" / "report.json"
    b = out / "tiny" / "det_m2" / "reports" / "report.json"
    capsys.readouterr()
    assert run(["compare", a, b, "--out", tmp_path / "cmp.txt"]) == 0
    text = capsys.readouterr().out
    assert "K(H)" in text and "width ratio" in text
    assert (tmp_path / "cmp.txt").read_text() == text


def test_blended_risk_measure_is_accepted(case_file, tmp_path):
    out = tmp_path / "out"
    assert run(["plan", "--case", case_file, "--risk", "E+avar:0.8", "--max-iters", "3", "--out", out]) == 0
    assert (out / "tiny" / "stoch_E+avar:0.8_m0" / "policy" / "policy.json").exists()


def test_generate_writes_dose_binary(case_file, tmp_path):
    from msimrt.artifacts import read_dose

    out = tmp_path / "out"
    assert run(["generate", "--case", case_file, "--out", out]) == 0
    m = read_dose(out / "tiny" / "nominal.dose")
    assert m.ndim == 2 and m.shape[1] > 0 and np.isfinite(m).all()


@pytest.mark.parametrize("argv", [
    ["plan", "--P", "0"],
    ["plan", "--F", "0"],
    ["plan", "--risk", "median"],
    ["plan", "--voxel-rate", "1.5"],
    ["plan", "--margin", "wide"],
    ["plan", "--case", "/nonexistent/case.yaml"],
    ["sweep", "--axis", "margin", "--values", ","],
    ["sweep", "--axis", "fractions", "--values", "0,2"],
    ["bogus"],
    [],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert run(argv + ["--out", tmp_path] if argv and argv[0] != "bogus" else argv) == 2


def test_simulate_without_policy_exits_2(case_file, tmp_path):
    assert run(["simulate", "--case", case_file, "--out", tmp_path / "empty"]) == 2


def test_compare_missing_report_exits_2(tmp_path):
    assert run(["compare", tmp_path / "a.json", tmp_path / "b.json"]) == 2


def test_sweep_margin_table(case_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(["sweep", "--case", case_file, "--axis", "margin", "--values", "0,2", "--out", out]) == 0
    text = (out / "tiny" / "sweep_margin.tsv").read_text()
    header = text.splitlines()[0].split("\t")
    assert header[:2] == ["tissue", "metric"] and len(header) == 5
