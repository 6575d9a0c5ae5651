"""
Tests for the closed_set_conformal module.
"""
import math

import numpy as np
import pytest

from conformal.closed_set_conformal import (
    ApsConfig,
    CalibrationRecord,
    SplitAssignment,
    SplitConformalClassifier,
    aps_score,
    aps_score_matrix,
    calibrate_threshold,
    closed_set_predict,
    conformal_pvalue,
    plug_in_predict,
    random_split,
    rank_pvalues,
    smooth_unseen_probs,
    smoothed_unseen_probability,
)
from conformal.data_core import LabeledDataset
from conformal.simulation import DpConfig, dp_sample, new_label_probability
from models.knn_classifier import KnnClassifier

DETERMINISTIC = ApsConfig(randomized=False)


@pytest.fixture
def separated():
    """Two well separated clusters of 100 points each."""
    rng = np.random.default_rng(21)
    labels = np.repeat([0, 1], 100)
    features = np.where(labels[:, None] == 0, 0.0, 10.0) + rng.normal(scale=0.5, size=(200, 2))
    return LabeledDataset(features, labels)


def test_aps_score_examples():
    rng = np.random.default_rng(0)
    assert aps_score([1.0], 0, DETERMINISTIC, rng) == pytest.approx(1.0)
    assert aps_score([0.6, 0.3, 0.1], 1, DETERMINISTIC, rng) == pytest.approx(0.9)
    assert aps_score([0.6, 0.3, 0.1], 0, DETERMINISTIC, rng) == pytest.approx(0.6)


def test_aps_score_randomized_range():
    rng = np.random.default_rng(1)
    for _ in range(20):
        score = aps_score([0.6, 0.3, 0.1], 1, ApsConfig(), rng)
        assert 0.6 <= score <= 0.9


def test_aps_score_invalid_index():
    with pytest.raises(IndexError):
        aps_score([0.5, 0.5], 2, DETERMINISTIC, np.random.default_rng(0))


def test_aps_score_matrix_ties_by_column():
    scores = aps_score_matrix(np.array([[0.4, 0.4, 0.2]]))
    assert scores[0].tolist() == pytest.approx([0.4, 0.8, 1.0])


def test_calibrate_threshold_examples():
    scores = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert calibrate_threshold(scores, 0.1) == pytest.approx(0.9)
    assert calibrate_threshold([0.42], 0.6) == 0.42
    assert calibrate_threshold([0.1, 0.2, 0.3, 0.4], 0.1) == math.inf


def test_calibrate_threshold_empty():
    with pytest.raises(ValueError, match="empty calibration scores"):
        calibrate_threshold([], 0.1)


def test_conformal_pvalue_examples():
    cal = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert conformal_pvalue(1.0, cal) == pytest.approx(0.1)
    assert conformal_pvalue(0.0, cal) == pytest.approx(1.0)

    with_ties = [0.1, 0.2, 0.3, 0.5, 0.5, 0.5, 0.7, 0.8, 0.9]
    # Three ties plus three strictly greater scores
    assert conformal_pvalue(0.5, with_ties) == pytest.approx(7 / 10)


def test_rank_pvalues_matches_scalar():
    rng = np.random.default_rng(2)
    cal = rng.uniform(size=30)
    tests = np.concatenate([rng.uniform(size=10), cal[:5]])
    expected = [conformal_pvalue(t, cal) for t in tests]
    np.testing.assert_allclose(rank_pvalues(tests, cal), expected)


def test_smoothed_unseen_probability():
    assert smoothed_unseen_probability(99, 9, 2) == pytest.approx(0.05)


def test_smooth_unseen_probs():
    probs = np.array([0.5, 0.5])
    np.testing.assert_array_equal(smooth_unseen_probs(probs, [], 99, 9, None), probs)

    extended = smooth_unseen_probs(probs, [7, 8], 99, 9, None)
    assert extended.shape == (4,)
    assert extended[2] == pytest.approx(0.05 / 1.1)
    assert extended.sum() == pytest.approx(1.0)

    noisy = smooth_unseen_probs(probs, [7, 8], 99, 9, np.random.default_rng(0), noise_scale=0.1)
    assert noisy.sum() == pytest.approx(1.0)
    assert 0.05 / 1.11 <= noisy[2] <= 0.055 / 1.1


def test_random_split_partitions():
    split = random_split(20, 5, np.random.default_rng(0))
    assert split.calibration.size == 5
    assert split.train.size == 15
    assert split.n == 20
    split.check_partition(20)
    with pytest.raises(ValueError, match="does not partition"):
        split.check_partition(21)


def test_split_assignment_overlap():
    with pytest.raises(ValueError, match="overlap"):
        SplitAssignment(train=[0, 1, 2], calibration=[2, 3])


def test_closed_set_predict_tiny_alpha():
    """Test that every candidate label is kept for alpha close to zero."""
    rng = np.random.default_rng(4)
    features = rng.normal(size=(40, 2))
    labels = rng.integers(0, 3, size=40)
    model = KnnClassifier().fit(features[:30], labels[:30])
    scores = aps_score_matrix(model.predict_proba(features[30:]), rng.uniform(size=10))
    columns = np.searchsorted(model.classes_, labels[30:])
    cal = CalibrationRecord(scores[np.arange(10), columns], labels[30:])
    prediction = closed_set_predict(model, cal, rng.normal(size=2), 1e-9, set(model.classes_.tolist()), ApsConfig(), rng)
    assert prediction.seen == frozenset(model.classes_.tolist())
    assert not prediction.joker


def test_closed_set_predict_unknown_label():
    model = KnnClassifier().fit(np.zeros((3, 1)), [0, 0, 1])
    cal = CalibrationRecord([0.5], [0])
    with pytest.raises(ValueError, match="not in the model's class index"):
        closed_set_predict(model, cal, [0.0], 0.1, {0, 5}, DETERMINISTIC, np.random.default_rng(0))


def test_separated_clusters_give_correct_singletons(separated):
    rng = np.random.default_rng(9)
    split = random_split(separated.n, 50, rng)
    classifier = SplitConformalClassifier().fit(separated, split, {0, 1}, rng)

    test_labels = rng.integers(0, 2, size=100)
    test_features = np.where(test_labels[:, None] == 0, 0.0, 10.0) + rng.normal(scale=0.5, size=(100, 2))
    predictions = classifier.predict(test_features, 0.1, rng)
    correct = [p.seen == frozenset({int(y)}) for p, y in zip(predictions, test_labels)]
    assert np.mean(correct) >= 0.8
    assert all(not p.joker for p in predictions)


def test_plug_in_predict_single_label():
    """A single observed label is always predicted."""
    rng = np.random.default_rng(6)
    data = LabeledDataset(rng.normal(size=(30, 2)), np.zeros(30))
    split = random_split(30, 10, rng)
    for x in rng.normal(size=(10, 2)):
        assert plug_in_predict(data, x, 0.1, split, DETERMINISTIC, rng).seen == frozenset({0})


def test_calibration_label_missing_from_training():
    """Test that labels seen only in calibration get smoothed probability columns."""
    rng = np.random.default_rng(7)
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1, 2])
    data = LabeledDataset(rng.normal(size=(9, 2)), labels)
    split = SplitAssignment(train=np.arange(8), calibration=[8])
    classifier = SplitConformalClassifier().fit(data, split, {0, 1, 2}, rng)
    assert classifier.columns_.tolist() == [0, 1, 2]
    pvalues = classifier.pvalues(rng.normal(size=(4, 2)), rng)
    assert pvalues.shape == (4, 3)
    assert np.all((pvalues > 0) & (pvalues <= 1))


def test_plug_in_coverage_between_bounds():
    """Coverage on DP data sits between 1-alpha minus the new-label mass and 1-alpha plus 1/(n_cal+1)."""
    theta, n, n_cal, alpha, reps = 10.0, 200, 20, 0.1, 400
    rng = np.random.default_rng(12)
    covered = 0
    for _ in range(reps):
        sample = dp_sample(DpConfig(theta=theta, n=n + 1), rng)
        reference = sample.subset(np.arange(n))
        prediction = plug_in_predict(reference, sample.features[n], alpha, random_split(n, n_cal, rng), ApsConfig(),
                                     rng)
        covered += int(sample.labels[n]) in prediction.seen

    coverage = covered / reps
    tolerance = 3 * math.sqrt(alpha * (1 - alpha) / reps)
    assert coverage >= 1 - alpha - new_label_probability(theta, n) - tolerance
    assert coverage <= 1 - alpha + 1 / (n_cal + 1) + tolerance


def test_sets_are_nested_in_alpha():
    rng = np.random.default_rng(13)
    data = LabeledDataset(rng.normal(size=(120, 2)), rng.integers(0, 4, size=120))
    classifier = SplitConformalClassifier().fit(data, random_split(120, 30, rng), {0, 1, 2, 3}, rng)
    pvalues = classifier.pvalues(rng.normal(size=(25, 2)), rng)
    alphas = [0.01, 0.05, 0.1, 0.2, 0.5, 0.9]
    sets = [classifier.sets_from_pvalues(pvalues, alpha) for alpha in alphas]
    for looser, tighter in zip(sets, sets[1:]):
        assert all(inner <= outer for outer, inner in zip(looser, tighter))

    model = KnnClassifier().fit(data.features[:90], data.labels[:90])
    scores = aps_score_matrix(model.predict_proba(data.features[90:]), rng.uniform(size=30))
    columns = np.searchsorted(model.classes_, data.labels[90:])
    cal = CalibrationRecord(scores[np.arange(30), columns], data.labels[90:])
    x = rng.normal(size=2)
    closed = [closed_set_predict(model, cal, x, alpha, {0, 1, 2, 3}, ApsConfig(), np.random.default_rng(5)).seen
              for alpha in alphas]
    assert all(inner <= outer for outer, inner in zip(closed, closed[1:]))


@pytest.mark.parametrize("tied", [False, True])
def test_conformal_pvalue_is_super_uniform(tied):
    """P(p <= u) stays at or below u for exchangeable scores, with or without ties."""
    trials, n_cal = 4000, 18
    rng = np.random.default_rng(14)
    if tied:
        draws = rng.integers(0, 5, size=(trials, n_cal + 1)).astype(float)
    else:
        draws = rng.uniform(size=(trials, n_cal + 1))
    pvalues = np.array([conformal_pvalue(row[-1], row[:-1]) for row in draws])
    assert rank_pvalues(draws[0, -1:], draws[0, :-1])[0] == pvalues[0]

    levels = np.linspace(0.05, 0.95, 19)
    empirical = (pvalues[:, None] <= levels).mean(axis=0)
    assert np.all(empirical <= levels + 3 * np.sqrt(levels * (1 - levels) / trials))
