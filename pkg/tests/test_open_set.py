"""
Tests for the open_set module.
"""
import numpy as np
import pytest

from conformal.data_core import LabeledDataset, PredictionSet, RandomSource
from conformal.open_set import (
    AlphaAllocation,
    CgtcComponents,
    ConformalGoodTuringClassifier,
    TuningConfig,
    allocation_loss,
    calibration_size,
    cardinality,
    cgtc_predict,
    fold_assignments,
    tune_allocation,
)
from conformal.simulation import DirichletProcessSimulator, DpConfig, finite_label_sample

ALLOCATION = AlphaAllocation(alpha_class=0.05, alpha_unseen=0.03, alpha_seen=0.02)


def components(psi_unseen, psi_seen, closed=frozenset({0, 1})):
    return CgtcComponents(
        closed_set=lambda x, alpha_class: closed,
        psi_unseen=lambda x: psi_unseen,
        psi_seen=lambda x: psi_seen,
    )


@pytest.fixture
def finite_data():
    """Balanced sample over five labels."""
    return finite_label_sample(5, 200, np.random.default_rng(31))


def test_cgtc_predict_cases():
    x = np.zeros(3)
    # Unseen rejected, seen kept
    assert cgtc_predict(x, ALLOCATION, components(0.01, 0.5)) == PredictionSet(frozenset({0, 1}), joker=False)
    # Seen rejected, unseen kept
    assert cgtc_predict(x, ALLOCATION, components(0.5, 0.01)) == PredictionSet(frozenset(), joker=True)
    # Neither rejected
    assert cgtc_predict(x, ALLOCATION, components(0.5, 0.5)) == PredictionSet(frozenset({0, 1}), joker=True)
    # Both rejected
    assert cgtc_predict(x, ALLOCATION, components(0.01, 0.01)) == PredictionSet(frozenset({0, 1}), joker=True)


def test_cgtc_predict_without_seen_budget():
    allocation = AlphaAllocation(alpha_class=0.05, alpha_unseen=0.05, alpha_seen=0.0)
    prediction = cgtc_predict(np.zeros(2), allocation, components(0.01, 0.3, frozenset({2})))
    assert prediction == PredictionSet(frozenset({2}))


def test_cardinality():
    assert cardinality(PredictionSet(frozenset({0, 1}))) == 2
    assert cardinality(PredictionSet(frozenset(), joker=True)) == 1
    assert cardinality(PredictionSet(frozenset({0}), joker=True)) == 2


def test_allocation_loss():
    seen = {0, 1}
    assert allocation_loss(PredictionSet(frozenset({0, 1})), 0, 2, seen, lambda_=1.0) == pytest.approx(1.0)
    assert allocation_loss(PredictionSet(frozenset(), joker=True), 1, 3, seen, lambda_=0.0) == pytest.approx(1.0)
    assert allocation_loss(PredictionSet(frozenset({0, 1})), 0, 4, seen, lambda_=0.5) == pytest.approx(0.25)
    assert allocation_loss(PredictionSet(frozenset(), joker=True), 7, 1, seen, lambda_=0.0) == 0.0
    with pytest.raises(ValueError, match="baseline_size"):
        allocation_loss(PredictionSet(frozenset({0})), 0, 0, seen)


def test_alpha_allocation():
    allocation = AlphaAllocation.from_budget(0.1, 0.1, 0.0)
    assert allocation.alpha_unseen == 0.0
    even = AlphaAllocation.even(0.09)
    even.check_total(0.09)
    with pytest.raises(ValueError, match="alpha_seen"):
        AlphaAllocation(alpha_class=0.05, alpha_unseen=0.05, alpha_seen=-0.1)
    with pytest.raises(ValueError, match="sums to"):
        ALLOCATION.check_total(0.2)


def test_tuning_grid():
    grid = TuningConfig().grid(0.1)
    assert (0.0, 0.1) in grid
    assert all(seen < 0.1 for seen, _ in grid)
    assert all(cls + seen <= 0.1 + 1e-12 for seen, cls in grid)
    assert min(cls for _, cls in grid) == pytest.approx(0.01)
    assert TuningConfig().grid(0.005) == []


def test_tuning_config_validation():
    with pytest.raises(ValueError, match="lambda"):
        TuningConfig(lambda_=1.5)
    with pytest.raises(ValueError, match="folds"):
        TuningConfig(folds=1)


def test_fold_assignments(caplog):
    folds = fold_assignments(35, 10, np.random.default_rng(0))
    assert len(folds) == 3
    assert sorted(np.concatenate(folds).tolist()) == list(range(35))
    assert "Reducing folds" in caplog.text
    with pytest.raises(ValueError, match="infeasible"):
        fold_assignments(15, 2, np.random.default_rng(0))


def test_calibration_size():
    assert calibration_size(200, 0.1) == 20
    assert calibration_size(3, 0.1) == 1
    assert calibration_size(2, 0.9) == 1
    with pytest.raises(ValueError):
        calibration_size(1, 0.1)


def test_classifier_rejects_unknown_split():
    with pytest.raises(ValueError, match="Unsupported split strategy"):
        ConformalGoodTuringClassifier(split_strategy="stratified")


def test_pvalues_shapes(finite_data):
    classifier = ConformalGoodTuringClassifier().fit(finite_data, RandomSource(1))
    queries = finite_label_sample(5, 12, np.random.default_rng(2)).features
    pvalues = classifier.pvalues(queries, RandomSource(3))
    assert len(pvalues) == 12
    assert pvalues.closed.shape == (12, 5)
    assert pvalues.label_space.tolist() == [0, 1, 2, 3, 4]
    sizes, joker = pvalues.sizes(ALLOCATION)
    predictions = pvalues.predict(ALLOCATION)
    assert sizes.tolist() == [cardinality(p) for p in predictions]
    assert joker.tolist() == [p.joker for p in predictions]


def test_pvalues_are_reproducible(finite_data):
    queries = finite_label_sample(5, 8, np.random.default_rng(4)).features
    first = ConformalGoodTuringClassifier().fit(finite_data, RandomSource(5)).pvalues(queries, RandomSource(6))
    second = ConformalGoodTuringClassifier().fit(finite_data, RandomSource(5)).pvalues(queries, RandomSource(6))
    np.testing.assert_array_equal(first.closed, second.closed)
    np.testing.assert_array_equal(first.psi_unseen, second.psi_unseen)
    np.testing.assert_array_equal(first.psi_seen, second.psi_seen)


def test_standard_baseline_has_no_tester(finite_data):
    classifier = ConformalGoodTuringClassifier().fit(finite_data, RandomSource(1), closed_set_only=True)
    with pytest.raises(ValueError, match="without the Good-Turing tests"):
        classifier.pvalues(finite_data.features[:2], RandomSource(2))
    predictions = classifier.predict_closed(finite_data.features[:3], 0.1, RandomSource(2))
    assert all(not p.joker for p in predictions)


def test_recovers_closed_set_sets_on_finite_labels(finite_data):
    """With alpha_unseen = (K+1)/(n+1) and alpha_seen = 0 the joker never appears."""
    alpha, n_labels, n = 0.1, 5, finite_data.n
    allocation = AlphaAllocation.from_budget(alpha, alpha - (n_labels + 1) / (n + 1), 0.0)
    for split in ("random", "selective"):
        classifier = ConformalGoodTuringClassifier(split_strategy=split).fit(finite_data, RandomSource(7))
        queries = finite_label_sample(n_labels, 50, np.random.default_rng(8)).features
        predictions = classifier.predict(queries, allocation, RandomSource(9))
        closed = classifier.predict_closed(queries, allocation.alpha_class, RandomSource(9))
        assert predictions == closed


def test_components_match_classifier(finite_data):
    classifier = ConformalGoodTuringClassifier().fit(finite_data, RandomSource(10))
    query = finite_data.features[0]
    prediction = cgtc_predict(query, ALLOCATION, classifier.components(RandomSource(11)))
    assert prediction == classifier.predict(query, ALLOCATION, RandomSource(11))[0]


def test_tune_closed_set_prefers_class_budget():
    data = finite_label_sample(5, 300, np.random.default_rng(12))
    allocation = tune_allocation(data, 0.1, TuningConfig(), RandomSource(13))
    assert allocation.alpha_class >= 0.08
    allocation.check_total(0.1)


def test_tune_dominant_novelty_uses_seen_budget():
    simulator = DirichletProcessSimulator(DpConfig(theta=1e6, n=200), np.random.default_rng(14))
    data = simulator.sample()
    allocation = tune_allocation(data, 0.1, TuningConfig(folds=5), RandomSource(15))
    assert allocation.alpha_seen > 0
    allocation.check_total(0.1)

    classifier = ConformalGoodTuringClassifier().fit(data, RandomSource(16))
    simulator.rng = np.random.default_rng(17)
    test = simulator.predictive(100)
    predictions = classifier.predict(test.features, allocation, RandomSource(18))
    assert np.mean([p.joker for p in predictions]) >= 0.95


def test_tune_is_reproducible(finite_data):
    first = tune_allocation(finite_data, 0.1, TuningConfig(folds=4), RandomSource(19))
    second = tune_allocation(finite_data, 0.1, TuningConfig(folds=4), RandomSource(19))
    assert first == second


def test_tune_infeasible_grid(finite_data):
    with pytest.raises(ValueError, match="infeasible"):
        tune_allocation(finite_data, 0.005, TuningConfig(), RandomSource(0))
