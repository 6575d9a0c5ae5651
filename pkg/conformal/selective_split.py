"""
Frequency-based selective splitting with weighted conformal calibration.

Calibration points are drawn with a probability that depends on the frequency of their
label, so singletons always stay in training. The split is no longer exchangeable, and
the calibration scores are reweighted by the probability of the split under each
label swap.
"""
import logging
import time
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np

from config import KNN_METRIC, KNN_NEIGHBORS, SMOOTHING_NOISE
from conformal.closed_set_conformal import ApsConfig, SplitAssignment, SplitConformalClassifier
from conformal.data_core import (
    FrequencyProfile,
    Label,
    LabeledDataset,
    PredictionSet,
    RandomSource,
    frequency_profile,
    observed_label_space,
    position_counts,
)
from models.knn_classifier import KnnClassifier

logger = logging.getLogger(__name__)

@dataclass(frozen=True)
class InclusionPolicy:
    """
    Calibration inclusion probabilities pi(k) by label frequency k.

    Attributes:
        n_cal: Target calibration size
        p1: Singleton proportion used to scale pi
        table: pi(k) for k = 0..len(table)-1, constant beyond
    """
    n_cal: int
    p1: float
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float).reshape(-1)
        if table.size == 0 or np.any(table < 0) or np.any(table > 1):
            raise ValueError("inclusion probabilities must lie in [0, 1]")
        object.__setattr__(self, "table", table)

    def prob(self, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.int64)
        return self.table[np.minimum(counts, self.table.size - 1)]

    def __call__(self, k: int) -> float:
        return float(self.prob(k))

    @classmethod
    def constant(cls, value: float) -> "InclusionPolicy":
        """pi(k) = value for every k (including singletons)."""
        return cls(n_cal=0, p1=0.0, table=np.array([value]))


def make_policy(n: int, profile: FrequencyProfile, n_cal: int) -> InclusionPolicy:
    """
    Recommended policy: pi(1) = 0 and pi(k) = min(n_cal / (n (1 - p1)), 1) for k >= 2.

    Args:
        n: Sample size
        profile: Frequency profile of the sample
        n_cal: Target calibration size, 1 <= n_cal <= n

    Returns:
        InclusionPolicy with p1 = M_1 / n clamped to [0, 1 - 1/n]
    """
    if not 1 <= n_cal <= n:
        raise ValueError(f"n_cal must lie in [1, {n}], got {n_cal}")
    p1 = min(max(profile.M(1) / n, 0.0), 1.0 - 1.0 / n)
    value = min(n_cal / (n * (1.0 - p1)), 1.0)
    max_count = max(profile.counts.values(), default=1)
    table = np.full(max(max_count, 2) + 1, value)
    table[:2] = 0.0
    return InclusionPolicy(n_cal=n_cal, p1=p1, table=table)


def selective_split(labels, policy: InclusionPolicy, rng: np.random.Generator) -> SplitAssignment:
    """Independent Bernoulli(pi(N(Y_i))) calibration indicators."""
    labels = np.asarray(labels)
    included = rng.uniform(size=labels.size) < policy.prob(position_counts(labels))
    return SplitAssignment(train=np.flatnonzero(~included), calibration=np.flatnonzero(included),
                           policy=policy)


@dataclass(frozen=True)
class ConformalizationWeights:
    """
    Normalized weights of the calibration points and of the test point.

    Attributes:
        calibration: Calibration indices, in the order of `cal_weights`
        cal_weights: w_j for each calibration index
        test_weight: w_{n+1}
    """
    calibration: np.ndarray
    cal_weights: np.ndarray
    test_weight: float

    @property
    def total(self) -> float:
        return float(self.cal_weights.sum() + self.test_weight)

    @property
    def uniform(self) -> bool:
        return bool(np.all(self.cal_weights == self.test_weight))


def _log_power(p: float, exponent: int) -> float:
    """exponent * log(p), with 0^0 = 1."""
    if exponent == 0:
        return 0.0
    if p <= 0.0:
        return -np.inf
    return exponent * np.log(p)


def _normalize(log_test: float, log_cal: np.ndarray, calibration: np.ndarray) -> ConformalizationWeights:
    logs = np.concatenate([[log_test], log_cal])
    top = np.max(logs)
    if not np.isfinite(top):
        raise ValueError("degenerate policy")
    unnormalized = np.exp(logs - top)
    weights = unnormalized / unnormalized.sum()
    return ConformalizationWeights(calibration=calibration, cal_weights=weights[1:], test_weight=float(weights[0]))


def _log_split_probability(sequence: np.ndarray, in_calibration: np.ndarray, policy: InclusionPolicy) -> float:
    """log P(split | labels) with positions grouped by inclusion probability."""
    probs = policy.prob(position_counts(sequence))
    log_p = 0.0
    for value in np.unique(probs):
        at_value = probs == value
        n_cal = int(np.count_nonzero(at_value & in_calibration))
        log_p += _log_power(float(value), n_cal) + _log_power(1.0 - float(value), int(np.count_nonzero(at_value)) - n_cal)
    return log_p


def weights_naive(y: Label, labels, split: SplitAssignment, policy: InclusionPolicy) -> ConformalizationWeights:
    """
    Conformalization weights from the full split probability of every swapped label sequence.

    Args:
        y: Candidate test label (seen or new)
        labels: Reference labels Y_1..Y_n
        split: Split of the reference data
        policy: Inclusion policy that generated the split

    Returns:
        ConformalizationWeights over the calibration points and the test point
    """
    labels = np.asarray(labels, dtype=np.int64)
    calibration = split.calibration
    in_calibration = np.zeros(labels.size, dtype=bool)
    in_calibration[calibration] = True

    log_test = _log_split_probability(labels, in_calibration, policy)
    log_cal = np.empty(calibration.size)
    for position, j in enumerate(calibration):
        swapped = labels.copy()
        swapped[j] = y
        log_cal[position] = _log_split_probability(swapped, in_calibration, policy)
    return _normalize(log_test, log_cal, calibration)


def weights_fast(y: Label, labels, split: SplitAssignment, policy: InclusionPolicy) -> ConformalizationWeights:
    """
    Conformalization weights from ratios p^(j) / p^(n+1).

    Swapping Y_j for y only changes the frequencies of y and Y_j, so each ratio involves
    just those two labels. Counts per split are precomputed once.

    Args:
        y: Candidate test label (seen or new)
        labels: Reference labels Y_1..Y_n
        split: Split of the reference data
        policy: Inclusion policy that generated the split

    Returns:
        ConformalizationWeights equal to `weights_naive`
    """
    labels = np.asarray(labels, dtype=np.int64)
    calibration = split.calibration
    if calibration.size == 0:
        return ConformalizationWeights(calibration=calibration, cal_weights=np.zeros(0), test_weight=1.0)

    total = Counter(labels.tolist())
    in_calibration = Counter(labels[calibration].tolist())
    y = int(y)
    count_y = total.get(y, 0)
    cal_y = in_calibration.get(y, 0)
    train_y = count_y - cal_y

    log_ratio_by_label: Dict[int, float] = {}
    for label, cal_count in in_calibration.items():
        if label == y:
            log_ratio_by_label[label] = 0.0
            continue
        count = total[label]
        train_count = count - cal_count
        # Net exponent of every distinct probability value, numerator minus denominator
        exponents: Dict[float, list] = {}
        for value, (a, b) in (
            (policy(count - 1), (cal_count - 1, train_count)),
            (policy(count_y + 1), (cal_y + 1, train_y)),
        ):
            entry = exponents.setdefault(value, [0, 0])
            entry[0] += a
            entry[1] += b
        denominator = 0.0
        for value, (a, b) in ((policy(count), (cal_count, train_count)), (policy(count_y), (cal_y, train_y))):
            entry = exponents.setdefault(value, [0, 0])
            entry[0] -= a
            entry[1] -= b
            denominator += _log_power(value, a) + _log_power(1.0 - value, b)
        if not np.isfinite(denominator):
            logger.info("Split has zero probability under the policy; using naive weights")
            return weights_naive(y, labels, split, policy)
        log_ratio = 0.0
        for value, (a, b) in exponents.items():
            log_ratio += _signed_log_power(value, a) + _signed_log_power(1.0 - value, b)
        log_ratio_by_label[label] = log_ratio

    log_cal = np.array([log_ratio_by_label[int(label)] for label in labels[calibration]])
    return _normalize(0.0, log_cal, calibration)


def _signed_log_power(p: float, exponent: int) -> float:
    """exponent * log(p) for an exponent of either sign; p = 0 is only finite at exponent 0."""
    if exponent == 0:
        return 0.0
    if p <= 0.0:
        # Negative exponents of zero only arise with a zero denominator, handled by the caller
        return -np.inf
    return exponent * np.log(p)


class WeightedSplitConformalClassifier(SplitConformalClassifier):
    """
    Split-conformal classifier calibrated with conformalization weights.

    The weights of each candidate label depend only on the label, so they are computed
    once at fit time.
    """

    def fit(self, data: LabeledDataset, split: SplitAssignment, label_space: Iterable[Label],
            rng: np.random.Generator, model: Optional[KnnClassifier] = None,
            policy: Optional[InclusionPolicy] = None) -> "WeightedSplitConformalClassifier":
        super().fit(data, split, label_space, rng, model=model)
        policy = policy or split.policy
        if policy is None:
            raise ValueError("weighted calibration needs the split's inclusion policy")
        self.policy_ = policy

        order = np.argsort(self.calibration_.scores, kind="stable")
        n_cal = order.size
        self._uniform = np.zeros(self.label_space_.size, dtype=bool)
        self._test_weights = np.zeros(self.label_space_.size)
        self._suffix = np.zeros((self.label_space_.size, n_cal + 1))
        self.weights_: Dict[int, ConformalizationWeights] = {}
        for row, y in enumerate(self.label_space_):
            weights = weights_fast(int(y), data.labels, split, policy)
            self.weights_[int(y)] = weights
            self._uniform[row] = weights.uniform
            self._test_weights[row] = weights.test_weight
            # Suffix sums over calibration scores sorted ascending
            self._suffix[row, :n_cal] = np.cumsum(weights.cal_weights[order][::-1])[::-1]
        return self

    def pvalues_from_scores(self, scores: np.ndarray) -> np.ndarray:
        scores = np.asarray(scores, dtype=float)
        unweighted = super().pvalues_from_scores(scores)
        first_at_least = np.searchsorted(self._sorted_scores, scores, side="left")
        rows = np.broadcast_to(np.arange(self.label_space_.size), scores.shape)
        weighted = self._test_weights[None, :] + self._suffix[rows, first_at_least]
        return np.where(self._uniform[None, :], unweighted, weighted)


def weighted_predict(x: np.ndarray, data: LabeledDataset, split: SplitAssignment, policy: InclusionPolicy,
                     model: Optional[KnnClassifier], alpha: float, cfg: ApsConfig, rng: np.random.Generator,
                     n_neighbors: int = KNN_NEIGHBORS, metric: str = KNN_METRIC,
                     smoothing_noise: float = SMOOTHING_NOISE) -> PredictionSet:
    """
    Weighted closed-set prediction set over the observed labels.

    Args:
        x: Query features
        data: Reference data
        split: Selective split of the reference data
        policy: Policy that generated the split
        model: Classifier trained on the training part, or None to train one
        alpha: Significance level
        cfg: Score options
        rng: Random generator

    Returns:
        PredictionSet {y : w_{n+1}(y) + sum_j w_j(y) 1{S_j >= S_{n+1}(y)} > alpha}
    """
    classifier = WeightedSplitConformalClassifier(n_neighbors=n_neighbors, metric=metric, aps=cfg,
                                                  smoothing_noise=smoothing_noise)
    classifier.fit(data, split, observed_label_space(data.labels), rng, model=model, policy=policy)
    return classifier.predict(np.asarray(x, dtype=float).reshape(1, -1), alpha, rng)[0]


def benchmark_weights(labels, n_cal: int, seed: int, repeats: int = 1) -> Dict[str, float]:
    """
    Time the naive and fast weight computations for one seen candidate label.

    Returns:
        Dictionary with seconds per call of each path and their ratio
    """
    labels = np.asarray(labels, dtype=np.int64)
    source = RandomSource(seed).stream("benchmark")
    policy = make_policy(labels.size, frequency_profile(labels), n_cal)
    split = selective_split(labels, policy, source.generator())
    y = int(labels[0])

    timings = {}
    for name, compute in (("naive", weights_naive), ("fast", weights_fast)):
        start = time.perf_counter()
        for _ in range(repeats):
            compute(y, labels, split, policy)
        timings[name] = (time.perf_counter() - start) / repeats
    timings["speedup"] = timings["naive"] / max(timings["fast"], 1e-12)
    logger.info(f"Weights for n={labels.size}, |cal|={split.calibration.size}: "
                f"naive {timings['naive']:.4f}s, fast {timings['fast']:.4f}s")
    return timings
