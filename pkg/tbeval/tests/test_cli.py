"""Tests for CLI interface"""

from pathlib import Path
from unittest.mock import patch

import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from ..cli import app
from ..domain.models import CalibrationResult
from ..tools.file_repos import save_cohort
from .builders import make_case, make_cohort


@pytest.fixture
def runner():
    """Create CLI test runner"""
    return CliRunner()


def _simulate(runner, dest, dataset, seed):
    return runner.invoke(
        app,
        [
            "--seed", str(seed),
            "simulate", "cohort",
            "--dest", str(dest),
            "--n-pos", "30",
            "--n-neg", "60",
            "--readers", "5",
            "--dataset", dataset,
            "--technical-issue-rate", "0.1",
        ],
    )


def _write_config(path, datasets, **extra):
    payload = {
        "inputs": [
            {"cases": f"{name}/cases.csv", "reads": f"{name}/reads.csv", "readers": f"{name}/readers.csv"}
            for name in datasets
        ],
        "bootstrap": {"n_resamples": 20},
        **extra,
    }
    path.write_text(yaml.safe_dump(payload), encoding="utf-8")
    return path


@pytest.fixture
def workspace(runner, tmp_path):
    """Two simulated datasets and a config pointing at them"""
    for dataset, seed in (("alpha", 1), ("beta", 2)):
        result = _simulate(runner, tmp_path / dataset, dataset, seed)
        assert result.exit_code == 0, result.stdout
    return _write_config(tmp_path / "analysis.yaml", ["alpha", "beta"])


def test_simulate_cohort_writes_csvs(runner, tmp_path):
    """Test tbeval simulate cohort"""
    result = _simulate(runner, tmp_path / "synthetic", "gamma", 5)

    assert result.exit_code == 0
    assert "Synthetic cohort written" in result.stdout
    for name in ("cases.csv", "reads.csv", "readers.csv"):
        assert (tmp_path / "synthetic" / name).exists()
    assert (tmp_path / "synthetic" / "cases.csv").read_text().count("\n") == 91


def test_validate_clean_cohort(runner, workspace, tmp_path):
    """Test tbeval validate on simulated data"""
    result = runner.invoke(app, ["--config", str(workspace), "--out", str(tmp_path / "out"), "validate"])

    assert result.exit_code == 0
    assert "No violations" in result.stdout
    assert (tmp_path / "out" / "validation.json").exists()
    assert (tmp_path / "out" / "manifest.json").exists()


def test_validate_reports_violations(runner, tmp_path):
    """Test that a duplicate patient in one dataset exits with 1"""
    cases = [make_case("v1", 1, 0.8, patient_id="P1"), make_case("v2", 0, 0.3, patient_id="P1")]
    save_cohort(make_cohort(cases, {"R1": [1, 0]}), tmp_path / "alpha")
    config = _write_config(tmp_path / "analysis.yaml", ["alpha"])

    result = runner.invoke(app, ["--config", str(config), "--out", str(tmp_path / "out"), "validate"])

    assert result.exit_code == 1
    assert "violation" in result.stdout


def test_missing_input_file(runner, tmp_path):
    """Test that an unreadable cohort file exits with 1"""
    config = _write_config(tmp_path / "analysis.yaml", ["missing"])

    result = runner.invoke(app, ["--config", str(config), "--out", str(tmp_path / "out"), "evaluate"])

    assert result.exit_code == 1
    assert "Error" in result.stdout


def test_validate_invalid_encoding(runner, workspace, tmp_path):
    """Test that a non-UTF-8 cases file exits with 1 instead of a traceback"""
    cases = tmp_path / "alpha" / "cases.csv"
    cases.write_bytes(cases.read_bytes().replace(b"alpha-00001", b"alpha-\xff0001", 1))

    result = runner.invoke(app, ["--config", str(workspace), "--out", str(tmp_path / "out"), "validate"])

    assert result.exit_code == 1
    assert "Error" in result.stdout
    assert not isinstance(result.exception, UnicodeDecodeError)


def test_missing_config_file(runner, tmp_path):
    """Test that a named config file must exist"""
    result = runner.invoke(app, ["--config", str(tmp_path / "nope.yaml"), "validate"])

    assert result.exit_code == 2
    assert "Configuration error" in result.stdout


def test_invalid_config_value(runner, tmp_path):
    """Test that a schema violation in the YAML exits with 2"""
    config = _write_config(tmp_path / "analysis.yaml", [], noninferiority={"margin": 2.0})

    result = runner.invoke(app, ["--config", str(config), "--out", str(tmp_path / "out"), "validate"])

    assert result.exit_code == 2


def test_match_unknown_mode(runner, workspace, tmp_path):
    """Test that an unknown match mode is a usage error"""
    with patch("tbeval.cli.EvaluationService") as mock_service:
        result = runner.invoke(
            app, ["--config", str(workspace), "--out", str(tmp_path / "out"), "match", "--mode", "closest"]
        )

    assert result.exit_code == 2
    assert "unknown match mode" in result.stdout
    mock_service.assert_not_called()


def test_cost_without_cohort(runner, tmp_path):
    """Test tbeval cost from configured sensitivity and specificity alone"""
    config = _write_config(tmp_path / "analysis.yaml", [], cost={"sensitivity": 0.94, "specificity": 0.95})

    result = runner.invoke(app, ["--config", str(config), "--out", str(tmp_path / "out"), "cost"])

    assert result.exit_code == 0
    sweep = pd.read_csv(tmp_path / "out" / "cost" / "cost_sweep.csv")
    measured = sweep[(sweep.scenario == "measured") & (sweep.p.round(2) == 0.1)].iloc[0]
    assert list(sweep.columns) == ["scenario", "p", "rate", "cost_per_patient", "cost_per_case", "naat_only_cost_per_case", "savings"]
    assert measured.cost_per_case == pytest.approx(35.16, abs=0.01)
    assert measured.savings == pytest.approx(0.731, abs=0.001)


def test_evaluate_and_dist_shift(runner, workspace, tmp_path):
    """Test that the analysis commands write their tables"""
    out = tmp_path / "out"
    for command in (["evaluate"], ["match", "--mode", "mean-reader"], ["subgroup"], ["dist-shift"]):
        result = runner.invoke(app, ["--config", str(workspace), "--out", str(out), *command])
        assert result.exit_code == 0, result.stdout

    for relative in ("tables/roc_auc.csv", "tables/match_mean-reader.csv", "tables/technical_issues.csv", "tables/ks_all.csv"):
        assert (out / relative).exists(), relative


def test_report_is_byte_identical(runner, workspace, tmp_path):
    """Test that report twice with one seed writes identical bundles"""
    bundles = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = runner.invoke(app, ["--config", str(workspace), "--out", str(out), "--seed", "7", "report"])
        assert result.exit_code == 0, result.stdout
        bundles.append(out)

    first = sorted(p.relative_to(bundles[0]) for p in bundles[0].rglob("*") if p.is_file())
    second = sorted(p.relative_to(bundles[1]) for p in bundles[1].rglob("*") if p.is_file())
    assert first == second
    assert Path("report.txt") in first
    assert Path("manifest.json") in first
    for relative in first:
        assert (bundles[0] / relative).read_bytes() == (bundles[1] / relative).read_bytes(), str(relative)


def test_simulate_calibrate(runner, mocker):
    """Test tbeval simulate calibrate reports the rejection rate"""
    calibrate = mocker.patch(
        "tbeval.cli.calibrate_type1",
        return_value=CalibrationResult(
            rejection_rate=0.024, rejections=24, n_trials=1000, alpha=0.025, margin=0.1, master_seed=3
        ),
    )

    result = runner.invoke(app, ["--seed", "3", "simulate", "calibrate", "--trials", "1000", "--readers", "9"])

    assert result.exit_code == 0
    assert "0.0240" in result.stdout
    spec = calibrate.call_args.args[0]
    assert spec.n_readers == 9
    assert calibrate.call_args.kwargs["master_seed"] == 3


def test_simulate_calibrate_bad_endpoint(runner):
    """Test that an unknown endpoint is a usage error"""
    result = runner.invoke(app, ["simulate", "calibrate", "--endpoint", "accuracy"])
    assert result.exit_code == 2
