"""
Tests for the command-line interface.
"""
import csv

import numpy as np
import pytest
from click.testing import CliRunner

from conformal.data_core import LabeledDataset, save_dataset_csv
from conformal.settings import METHODS, load_config_file
from conformal.simulation import finite_label_sample
from main import main


def prediction_lines(result):
    return [line.split() for line in result.stdout.splitlines() if "psi_unseen=" in line]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def separated_csv(tmp_path):
    """Two frequent labels in well separated clusters."""
    rng = np.random.default_rng(41)
    features = np.vstack([rng.normal(0.0, 0.3, size=(40, 2)), rng.normal(10.0, 0.3, size=(40, 2))])
    data = LabeledDataset.from_raw(features, ["a"] * 40 + ["b"] * 40)
    return save_dataset_csv(data, tmp_path / "separated.csv")


@pytest.fixture
def diverse_csv(tmp_path):
    """Twenty singletons plus two frequent labels."""
    rng = np.random.default_rng(42)
    features = np.vstack([rng.uniform(size=(20, 2)), rng.normal(0.2, 0.02, size=(10, 2)),
                          rng.normal(0.8, 0.02, size=(10, 2))])
    labels = [f"s{i}" for i in range(20)] + ["a"] * 10 + ["b"] * 10
    return save_dataset_csv(LabeledDataset.from_raw(features, labels), tmp_path / "diverse.csv")


def test_simulate_is_deterministic(runner, tmp_path):
    first, second = tmp_path / "first.csv", tmp_path / "second.csv"
    for out in (first, second):
        result = runner.invoke(main, ["simulate", "--theta", "100", "--n", "50", "--seed", "7", "--out", str(out)])
        assert result.exit_code == 0, result.output
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text().splitlines()[0] == "label,f0,f1,f2"
    assert len(first.read_text().splitlines()) == 51


def test_simulate_with_test_points(runner, tmp_path):
    out = tmp_path / "data.csv"
    result = runner.invoke(main, ["simulate", "--theta", "10", "--n", "30", "--tests", "5", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert len((tmp_path / "data_test.csv").read_text().splitlines()) == 6


def test_simulate_missing_theta(runner, tmp_path):
    result = runner.invoke(main, ["simulate", "--out", str(tmp_path / "data.csv")])
    assert result.exit_code == 1
    assert "theta" in result.output


def test_simulate_bad_flag_type(runner):
    result = runner.invoke(main, ["simulate", "--theta", "many"])
    assert result.exit_code == 1


def test_saved_config_reproduces_output(runner, tmp_path):
    first, second, config = tmp_path / "first.csv", tmp_path / "second.csv", tmp_path / "simulate.toml"
    result = runner.invoke(main, ["simulate", "--theta", "20", "--n", "40", "--seed", "5", "--out", str(first),
                                  "--save-config", str(config)])
    assert result.exit_code == 0, result.output
    assert load_config_file(config)["theta"] == 20.0

    result = runner.invoke(main, ["simulate", "--config", str(config), "--out", str(second)])
    assert result.exit_code == 0, result.output
    assert first.read_bytes() == second.read_bytes()


def test_run_compares_all_methods(runner, tmp_path):
    out, plot = tmp_path / "metrics.csv", tmp_path / "plot.csv"
    args = ["run", "--theta", "10", "--n", "60", "--reps", "1", "--tests", "10", "--seed", "2",
            "--out", str(out), "--plot-out", str(plot)]
    result = runner.invoke(main, args)
    assert result.exit_code == 0, result.output

    with open(out, newline="") as f:
        rows = list(csv.DictReader(f))
    assert {row["method"] for row in rows} == set(METHODS)
    for method in METHODS:
        metrics = {row["metric"] for row in rows if row["method"] == method}
        assert {"coverage", "size", "joker"} <= metrics
    assert len(plot.read_text().splitlines()) == 1 + len(METHODS)

    first = out.read_bytes()
    assert runner.invoke(main, args).exit_code == 0
    assert out.read_bytes() == first


def test_run_tuned_reports_allocations(runner, tmp_path):
    out, report = tmp_path / "metrics.csv", tmp_path / "report.md"
    result = runner.invoke(main, ["run", "--method", "cgtc-random", "--theta", "10", "--n", "100", "--reps", "2",
                                  "--tests", "5", "--alloc", "tuned", "--out", str(out), "--report", str(report)])
    assert result.exit_code == 0, result.output

    with open(tmp_path / "metrics_allocations.csv", newline="") as f:
        allocations = list(csv.DictReader(f))
    assert [row["rep"] for row in allocations] == ["0", "1"]
    for row in allocations:
        total = float(row["alpha_class"]) + float(row["alpha_unseen"]) + float(row["alpha_seen"])
        assert total == pytest.approx(0.1, abs=1e-12)
    markdown = report.read_text()
    assert "### cgtc-random, theta=10.0, n=100" in markdown
    assert "2 repetitions of 5 test points, 2 tuned allocations." in markdown
    assert "**cgtc-random, theta=10.0, n=100: tuned allocations**" in markdown


def test_run_invalid_method(runner, tmp_path):
    result = runner.invoke(main, ["run", "--method", "cgtc", "--theta", "10", "--out", str(tmp_path / "m.csv")])
    assert result.exit_code == 1
    assert "standard-random" in result.output


def test_run_missing_dataset(runner, tmp_path):
    result = runner.invoke(main, ["run", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m.csv")])
    assert result.exit_code == 2


def test_tune_prefers_class_budget(runner, tmp_path):
    data = save_dataset_csv(finite_label_sample(5, 300, np.random.default_rng(43)), tmp_path / "closed.csv")
    outputs = [tmp_path / "first.toml", tmp_path / "second.toml"]
    for out in outputs:
        result = runner.invoke(main, ["tune", "--data", str(data), "--seed", "3", "--out", str(out)])
        assert result.exit_code == 0, result.output
    assert outputs[0].read_bytes() == outputs[1].read_bytes()

    allocation = load_config_file(outputs[0])
    assert allocation["alpha_class"] >= 0.08
    assert sum(allocation.values()) == pytest.approx(0.1, abs=1e-12)


def test_predict_frequent_label(runner, separated_csv):
    result = runner.invoke(main, ["predict", "--reference", str(separated_csv), "--query", "0.0,0.0",
                                  "--alpha", "0.1", "--alpha-class", "0.05", "--alpha-unseen", "0.05",
                                  "--alpha-seen", "0.0"])
    assert result.exit_code == 0, result.output
    [tokens] = prediction_lines(result)
    assert "a" in tokens
    assert "*" not in tokens
    assert tokens[-2].startswith("psi_unseen=")
    assert tokens[-1].startswith("psi_seen=")


def test_predict_far_query_gets_joker(runner, diverse_csv, tmp_path):
    queries = tmp_path / "queries.csv"
    queries.write_text("f0,f1\n100.0,100.0\n0.2,0.2\n")
    out = tmp_path / "predictions.txt"
    result = runner.invoke(main, ["predict", "--reference", str(diverse_csv), "--queries", str(queries),
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = prediction_lines(result)
    assert len(lines) == 2
    assert "*" in lines[0]
    assert out.read_text().splitlines() == [" ".join(tokens) for tokens in lines]


def test_predict_malformed_query(runner, separated_csv):
    result = runner.invoke(main, ["predict", "--reference", str(separated_csv), "--query", "1.0,abc"])
    assert result.exit_code == 2
    assert "row 1" in result.output


def test_predict_dimension_mismatch(runner, separated_csv):
    result = runner.invoke(main, ["predict", "--reference", str(separated_csv), "--query", "1.0"])
    assert result.exit_code == 2
    assert "expected 2 features" in result.output


def test_predict_needs_queries(runner, separated_csv):
    result = runner.invoke(main, ["predict", "--reference", str(separated_csv)])
    assert result.exit_code == 1
