"""
Conformal Good-Turing p-values for the label-frequency hypotheses.

H_k states that the test label appears exactly k times among the n reference labels
(k = 0 means the test label is new). Three p-values are available:

    GT   feature-blind, ((k+1) M_{k+1} + k + 1) / (n + 1)
    RGT  randomized feature-blind, uniform on {1, ..., (k+1) M_{k+1} + k + 1} / (n + 1)
    XGT  feature-based, ranks a one-class score of the test features against the
         samples whose labels appear k or k+1 times

The composite p-value for "the test label was seen" combines the per-k p-values with
power-law constants c_k.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from config import LOF_NEIGHBORS, POWER_LAW_BETA
from conformal.data_core import FrequencyProfile, LabeledDataset, frequency_profile, position_counts
from models.base_model import BaseOneClassScorer, check_query
from models.lof_scorer import LocalOutlierFactor

logger = logging.getLogger(__name__)

PVALUE_VARIANTS = ("GT", "RGT", "XGT")


@dataclass(frozen=True)
class FrequencyHypothesis:
    """H_k: the test label appears exactly k times in the reference labels."""
    k: int

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be nonnegative, got {self.k}")

    def testable(self, profile: FrequencyProfile) -> bool:
        """H_k with k >= 1 and M_k = 0 can never hold."""
        return self.k <= profile.n and (self.k == 0 or profile.M(self.k) > 0)


@dataclass(frozen=True)
class PowerLawWeights:
    """Multiple-testing constants c_k proportional to k^(-beta), k = 1..n."""
    beta: float
    c: np.ndarray

    def __getitem__(self, k: int) -> float:
        if not 1 <= k <= self.c.size:
            raise IndexError(f"k={k} outside 1..{self.c.size}")
        return float(self.c[k - 1])

    def __len__(self) -> int:
        return int(self.c.size)


def _check_k(k: int, profile: FrequencyProfile) -> None:
    if not 0 <= k <= profile.n:
        raise ValueError(f"k={k} outside 0..{profile.n}")


def gt_support(k: int, profile: FrequencyProfile) -> int:
    """(k+1) M_{k+1} + k + 1, the numerator of the feature-blind p-value."""
    return (k + 1) * profile.M(k + 1) + k + 1


def gt_pvalue(k: int, profile: FrequencyProfile) -> float:
    """Feature-blind Good-Turing p-value for H_k."""
    _check_k(k, profile)
    return gt_support(k, profile) / (profile.n + 1)


def rgt_pvalues(k: int, profile: FrequencyProfile, rng: np.random.Generator, size: int) -> np.ndarray:
    """`size` independent draws of the randomized feature-blind p-value."""
    _check_k(k, profile)
    draws = rng.integers(0, gt_support(k, profile), size=size)
    return (draws + 1.0) / (profile.n + 1)


def rgt_pvalue(k: int, profile: FrequencyProfile, rng: np.random.Generator) -> float:
    """Randomized feature-blind Good-Turing p-value for H_k."""
    return float(rgt_pvalues(k, profile, rng, 1)[0])


class ConstantScorer(BaseOneClassScorer):
    """Feature-blind stand-in: every query gets the same score."""

    def fit(self, features: np.ndarray) -> "ConstantScorer":
        self._dim = np.asarray(features).shape[1] if np.ndim(features) == 2 else 0
        return self

    def score_samples(self, features: np.ndarray) -> np.ndarray:
        return np.zeros(check_query(features, self._dim).shape[0])


@dataclass
class FrequencyScorer:
    """
    One-class scorer serving H_k, trained on samples whose label frequency is neither k nor k+1.

    Attributes:
        k: Hypothesis index
        scorer: Fitted one-class scorer
        training_indices: Sorted indices the scorer was trained on
        fallback: True when too few samples remained and the scorer is feature-blind
        next_scores: Sorted scores of S_{k+1}
        group_scores: Scores of S_k grouped by label, shape (M_k, k)
    """
    k: int
    scorer: BaseOneClassScorer
    training_indices: np.ndarray
    fallback: bool
    next_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    group_scores: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def score(self, features: np.ndarray) -> np.ndarray:
        return self.scorer.score_samples(features)


def fit_frequency_scorer(k: int, data: LabeledDataset, n_neighbors: int = LOF_NEIGHBORS,
                         scorer_factory: Optional[Callable[[], BaseOneClassScorer]] = None) -> FrequencyScorer:
    """
    Fit the one-class scorer for H_k.

    Args:
        k: Hypothesis index
        data: Reference data
        n_neighbors: LOF neighborhood size
        scorer_factory: Optional constructor of an unfitted scorer (defaults to LOF)

    Returns:
        FrequencyScorer with the reference scores of S_k and S_{k+1} cached
    """
    counts = position_counts(data.labels)
    excluded = (counts == k) | (counts == k + 1)
    training_indices = np.flatnonzero(~excluded)

    if training_indices.size < 2:
        logger.info(f"Only {training_indices.size} samples outside frequencies {k} and {k + 1}; "
                    f"using the feature-blind score for H_{k}")
        scorer: BaseOneClassScorer = ConstantScorer().fit(data.features)
        fallback = True
    else:
        scorer = scorer_factory() if scorer_factory else LocalOutlierFactor(n_neighbors=n_neighbors)
        scorer.fit(data.features[training_indices])
        fallback = False

    result = FrequencyScorer(k=k, scorer=scorer, training_indices=training_indices, fallback=fallback)

    next_indices = np.flatnonzero(counts == k + 1)
    if next_indices.size:
        result.next_scores = np.sort(scorer.score_samples(data.features[next_indices]))
    if k > 0:
        group_indices = np.flatnonzero(counts == k)
        if group_indices.size:
            # Sorting by label puts the k members of each label next to each other
            group_indices = group_indices[np.argsort(data.labels[group_indices], kind="stable")]
            scores = scorer.score_samples(data.features[group_indices])
            result.group_scores = scores.reshape(-1, k)
    return result


def xgt_pvalues(k: int, data: LabeledDataset, x_test: np.ndarray, scorer: FrequencyScorer,
                profile: Optional[FrequencyProfile] = None) -> np.ndarray:
    """
    Feature-based Good-Turing p-values for H_k, one per query row.

    Args:
        k: Hypothesis index
        data: Reference data the scorer was fitted for
        x_test: Query features, shape (m, d) or (d,)
        scorer: FrequencyScorer for the same k
        profile: Optional precomputed frequency profile of `data`

    Returns:
        Array of shape (m,)
    """
    if scorer.k != k:
        raise ValueError(f"scorer serves H_{scorer.k}, not H_{k}")
    profile = profile or frequency_profile(data.labels)
    _check_k(k, profile)
    x_test = check_query(x_test, data.dim)
    test_scores = scorer.score(x_test)

    next_scores = scorer.next_scores
    next_count = next_scores.size - np.searchsorted(next_scores, test_scores, side="left")
    max_term = np.zeros(test_scores.size)
    if k > 0 and scorer.group_scores.size:
        exceed = scorer.group_scores[None, :, :] >= test_scores[:, None, None]
        max_term = exceed.sum(axis=2).max(axis=1)
    return (1.0 + next_count + max_term) / (profile.n + 1)


def xgt_pvalue(k: int, data: LabeledDataset, x_test: np.ndarray, scorer: FrequencyScorer) -> float:
    """Feature-based Good-Turing p-value for a single query."""
    profile = frequency_profile(data.labels)
    if k > 0 and profile.M(k) == 0:
        logger.debug(f"H_{k} is vacuous: no label appears exactly {k} times")
    return float(xgt_pvalues(k, data, np.asarray(x_test, dtype=float).reshape(1, -1), scorer, profile)[0])


def power_law_weights(n: int, beta: float = POWER_LAW_BETA) -> PowerLawWeights:
    """c_k = k^(-beta) / sum_j j^(-beta) for k = 1..n."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    raw = np.arange(1, n + 1, dtype=float) ** (-beta)
    return PowerLawWeights(beta=beta, c=raw / raw.sum())


def seen_pvalue(pvals: Mapping[int, float], weights: PowerLawWeights) -> float:
    """
    Composite p-value for "the test label was seen": max over k of psi_k / c_k.

    The value may exceed 1.
    """
    if not pvals:
        raise ValueError("no observed labels")
    return max(float(p) / weights[k] for k, p in pvals.items())


class GoodTuringTester:
    """
    Good-Turing p-values of a reference dataset for batches of queries.

    Scorers are fitted once per k and reused for every query.
    """

    def __init__(self, data: LabeledDataset, unseen_variant: str = "XGT", seen_variant: str = "RGT",
                 beta: float = POWER_LAW_BETA, n_neighbors: int = LOF_NEIGHBORS,
                 scorer_factory: Optional[Callable[[], BaseOneClassScorer]] = None):
        for variant in (unseen_variant, seen_variant):
            if variant not in PVALUE_VARIANTS:
                raise ValueError(f"Unsupported p-value variant: {variant}. Choose from {', '.join(PVALUE_VARIANTS)}")
        if data.n == 0:
            raise ValueError("no observed labels")
        self.data = data
        self.unseen_variant = unseen_variant
        self.seen_variant = seen_variant
        self.n_neighbors = n_neighbors
        self.scorer_factory = scorer_factory
        self.profile = frequency_profile(data.labels)
        self.weights = power_law_weights(data.n, beta)
        self._scorers: Dict[int, FrequencyScorer] = {}

    def scorer(self, k: int) -> FrequencyScorer:
        if k not in self._scorers:
            self._scorers[k] = fit_frequency_scorer(k, self.data, self.n_neighbors, self.scorer_factory)
        return self._scorers[k]

    def pvalues(self, k: int, features: np.ndarray, variant: str, rng: np.random.Generator) -> np.ndarray:
        """p-values for H_k under the given variant, one per query row."""
        features = check_query(features, self.data.dim)
        m = features.shape[0]
        if variant == "GT":
            return np.full(m, gt_pvalue(k, self.profile))
        if variant == "RGT":
            return rgt_pvalues(k, self.profile, rng, m)
        if variant == "XGT":
            return xgt_pvalues(k, self.data, features, self.scorer(k), self.profile)
        raise ValueError(f"Unsupported p-value variant: {variant}")

    def unseen(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """psi_unseen, the p-value for H_0."""
        return self.pvalues(0, features, self.unseen_variant, rng)

    def seen(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """psi_seen = max over observed frequencies k of psi_k / c_k."""
        observed = self.profile.observed_frequencies()
        if not observed:
            raise ValueError("no observed labels")
        features = check_query(features, self.data.dim)
        ratios = [self.pvalues(k, features, self.seen_variant, rng) / self.weights[k] for k in observed]
        return np.max(np.vstack(ratios), axis=0)
