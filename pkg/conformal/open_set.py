"""
Conformal Good-Turing classification: joker-augmented prediction sets and budget tuning.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from config import (
    ALPHA_CLASS_START,
    ALPHA_CLASS_STEP,
    ALPHA_SEEN_CANDIDATES,
    CAL_FRACTION,
    KNN_METRIC,
    KNN_NEIGHBORS,
    LOF_NEIGHBORS,
    POWER_LAW_BETA,
    SMOOTHING_NOISE,
    TUNING_FOLDS,
    TUNING_LAMBDA,
    TUNING_MIN_FOLD_SIZE,
)
from conformal.closed_set_conformal import ApsConfig, SplitAssignment, SplitConformalClassifier, random_split
from conformal.data_core import Label, LabeledDataset, PredictionSet, RandomSource, frequency_profile, observed_label_space
from conformal.good_turing import GoodTuringTester
from conformal.selective_split import WeightedSplitConformalClassifier, make_policy, selective_split

logger = logging.getLogger(__name__)

SPLIT_STRATEGIES = ("random", "selective")
SUM_TOLERANCE = 1e-12


@dataclass(frozen=True)
class AlphaAllocation:
    """Split of the significance budget between the closed-set, unseen and seen tests."""
    alpha_class: float
    alpha_unseen: float
    alpha_seen: float

    def __post_init__(self):
        for name in ("alpha_class", "alpha_unseen", "alpha_seen"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    @property
    def alpha(self) -> float:
        return self.alpha_class + self.alpha_unseen + self.alpha_seen

    @classmethod
    def from_budget(cls, alpha: float, alpha_class: float, alpha_seen: float) -> "AlphaAllocation":
        """Allocation with alpha_unseen taking whatever remains of alpha."""
        alpha_unseen = alpha - alpha_class - alpha_seen
        if abs(alpha_unseen) < SUM_TOLERANCE:
            alpha_unseen = 0.0
        return cls(alpha_class=alpha_class, alpha_unseen=alpha_unseen, alpha_seen=alpha_seen)

    @classmethod
    def even(cls, alpha: float) -> "AlphaAllocation":
        return cls.from_budget(alpha, alpha / 3, alpha / 3)

    def check_total(self, alpha: float) -> None:
        if abs(self.alpha - alpha) > SUM_TOLERANCE:
            raise ValueError(f"allocation sums to {self.alpha!r}, expected {alpha!r}")


@dataclass(frozen=True)
class TuningConfig:
    """Options of the cross-validated budget allocation search."""
    lambda_: float = TUNING_LAMBDA
    folds: int = TUNING_FOLDS
    seen_candidates: Tuple[float, ...] = ALPHA_SEEN_CANDIDATES
    class_start: float = ALPHA_CLASS_START
    class_step: float = ALPHA_CLASS_STEP

    def __post_init__(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lambda_}")
        if self.folds < 2:
            raise ValueError(f"folds must be at least 2, got {self.folds}")
        if self.class_step <= 0:
            raise ValueError(f"class_step must be positive, got {self.class_step}")

    def grid(self, alpha: float) -> List[Tuple[float, float]]:
        """(alpha_seen, alpha_class) pairs searched for a total budget alpha."""
        pairs = []
        for alpha_seen in sorted(c for c in self.seen_candidates if 0.0 <= c < alpha):
            remaining = alpha - alpha_seen
            i = 0
            while True:
                alpha_class = round(self.class_start + i * self.class_step, 12)
                if alpha_class > remaining + SUM_TOLERANCE:
                    break
                pairs.append((alpha_seen, min(alpha_class, remaining)))
                i += 1
        return pairs


def combine(closed: FrozenSet[Label], psi_unseen: float, psi_seen: float,
            allocation: AlphaAllocation) -> PredictionSet:
    """
    Joker rule.

    (i) psi_unseen <= alpha_unseen and psi_seen > alpha_seen: closed-set labels only
    (ii) psi_unseen > alpha_unseen and psi_seen <= alpha_seen: joker only
    (iii) otherwise: closed-set labels and the joker
    """
    unseen_rejected = psi_unseen <= allocation.alpha_unseen
    seen_rejected = psi_seen <= allocation.alpha_seen
    if unseen_rejected and not seen_rejected:
        return PredictionSet(frozenset(closed), joker=False)
    if seen_rejected and not unseen_rejected:
        return PredictionSet(frozenset(), joker=True)
    return PredictionSet(frozenset(closed), joker=True)


@dataclass(frozen=True)
class CgtcComponents:
    """
    Per-query providers of the three ingredients of a joker-augmented set.

    Attributes:
        closed_set: (x, alpha_class) -> closed-set labels
        psi_unseen: x -> p-value for "the test label is new"
        psi_seen: x -> p-value for "the test label was seen"
    """
    closed_set: Callable[[np.ndarray, float], FrozenSet[Label]]
    psi_unseen: Callable[[np.ndarray], float]
    psi_seen: Callable[[np.ndarray], float]


def cgtc_predict(x: np.ndarray, allocation: AlphaAllocation, components: CgtcComponents) -> PredictionSet:
    """
    Joker-augmented prediction set for one query.

    Reference data and randomness are not arguments here: they are bound inside the
    component callables, as produced by `ConformalGoodTuringClassifier.components(source)`
    after fitting on the reference data.

    Args:
        x: Query features
        allocation: Significance budgets of the three tests
        components: Closed-set predictor and the two Good-Turing p-value providers

    Returns:
        PredictionSet under the joker rule of `combine`
    """
    closed = components.closed_set(x, allocation.alpha_class)
    return combine(closed, components.psi_unseen(x), components.psi_seen(x), allocation)


def cardinality(prediction: PredictionSet) -> int:
    """Number of seen labels, plus one for the joker."""
    return len(prediction.seen) + (1 if prediction.joker else 0)


def allocation_loss(prediction: PredictionSet, y_true: Label, baseline_size: int, seen_space,
                    lambda_: float = TUNING_LAMBDA) -> float:
    """
    lambda * |set| / baseline_size + (1 - lambda) * 1{joker included and y_true seen}.
    """
    if baseline_size < 1:
        raise ValueError("baseline_size must be at least 1")
    wasted_joker = prediction.joker and int(y_true) in seen_space
    return lambda_ * cardinality(prediction) / baseline_size + (1.0 - lambda_) * float(wasted_joker)


@dataclass(frozen=True)
class CgtcPValues:
    """
    All p-values needed for joker-augmented sets of a batch of queries.

    Attributes:
        label_space: Candidate seen labels, column order of `closed`
        closed: Conformal p-values of each candidate, shape (m, |label space|)
        psi_unseen: shape (m,)
        psi_seen: shape (m,)
    """
    label_space: np.ndarray
    closed: np.ndarray
    psi_unseen: np.ndarray
    psi_seen: np.ndarray

    def __len__(self) -> int:
        return int(self.psi_unseen.shape[0])

    def closed_sets(self, alpha_class: float) -> List[FrozenSet[Label]]:
        keep = self.closed > alpha_class
        return [frozenset(int(y) for y in self.label_space[row]) for row in keep]

    def predict(self, allocation: AlphaAllocation) -> List[PredictionSet]:
        return [combine(closed, float(u), float(s), allocation)
                for closed, u, s in zip(self.closed_sets(allocation.alpha_class), self.psi_unseen, self.psi_seen)]

    def sizes(self, allocation: AlphaAllocation) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorized cardinalities and joker flags."""
        closed_sizes = np.count_nonzero(self.closed > allocation.alpha_class, axis=1)
        unseen_rejected = self.psi_unseen <= allocation.alpha_unseen
        seen_rejected = self.psi_seen <= allocation.alpha_seen
        joker_only = seen_rejected & ~unseen_rejected
        joker = ~(unseen_rejected & ~seen_rejected)
        sizes = np.where(joker_only, 1, closed_sizes + joker)
        return sizes, joker


def calibration_size(n: int, cal_fraction: float) -> int:
    """Target calibration size, at least one point and leaving at least one for training."""
    if n < 2:
        raise ValueError(f"at least 2 reference samples are needed, got {n}")
    return int(min(max(round(cal_fraction * n), 1), n - 1))


def make_split(data: LabeledDataset, strategy: str, cal_fraction: float, rng: np.random.Generator) -> SplitAssignment:
    """Random split with a fixed calibration fraction, or the frequency-based selective split."""
    n_cal = calibration_size(data.n, cal_fraction)
    if strategy == "random":
        return random_split(data.n, n_cal, rng)
    if strategy == "selective":
        policy = make_policy(data.n, frequency_profile(data.labels), n_cal)
        return selective_split(data.labels, policy, rng)
    raise ValueError(f"Unsupported split strategy: {strategy}. Choose from {', '.join(SPLIT_STRATEGIES)}")


class ConformalGoodTuringClassifier:
    """
    Open-set classifier returning prediction sets that may include the joker.

    The closed-set part is split-conformal over the observed labels (weighted when the
    split is selective); the joker is governed by Good-Turing p-values.
    """

    def __init__(self, split_strategy: str = "random", unseen_variant: str = "XGT", seen_variant: str = "RGT",
                 n_neighbors: int = KNN_NEIGHBORS, metric: str = KNN_METRIC, lof_neighbors: int = LOF_NEIGHBORS,
                 beta: float = POWER_LAW_BETA, cal_fraction: float = CAL_FRACTION,
                 randomized_aps: bool = True, smoothing_noise: float = SMOOTHING_NOISE):
        if split_strategy not in SPLIT_STRATEGIES:
            raise ValueError(f"Unsupported split strategy: {split_strategy}. Choose from {', '.join(SPLIT_STRATEGIES)}")
        self.split_strategy = split_strategy
        self.unseen_variant = unseen_variant
        self.seen_variant = seen_variant
        self.n_neighbors = n_neighbors
        self.metric = metric
        self.lof_neighbors = lof_neighbors
        self.beta = beta
        self.cal_fraction = cal_fraction
        self.randomized_aps = randomized_aps
        self.smoothing_noise = smoothing_noise

    def get_params(self) -> Dict[str, object]:
        return {
            "split_strategy": self.split_strategy,
            "unseen_variant": self.unseen_variant,
            "seen_variant": self.seen_variant,
            "n_neighbors": self.n_neighbors,
            "metric": self.metric,
            "lof_neighbors": self.lof_neighbors,
            "beta": self.beta,
            "cal_fraction": self.cal_fraction,
            "randomized_aps": self.randomized_aps,
            "smoothing_noise": self.smoothing_noise,
        }

    def clone(self) -> "ConformalGoodTuringClassifier":
        return ConformalGoodTuringClassifier(**self.get_params())

    def fit(self, data: LabeledDataset, source: RandomSource, closed_set_only: bool = False) -> "ConformalGoodTuringClassifier":
        """
        Split the reference data, calibrate the closed-set part and prepare the Good-Turing tests.

        Args:
            data: Reference data
            source: Randomness for the split and the calibration scores
            closed_set_only: Skip the Good-Turing tests (standard conformal baseline)

        Returns:
            self
        """
        self.data_ = data
        self.label_space_ = observed_label_space(data.labels)
        self.split_ = make_split(data, self.split_strategy, self.cal_fraction, source.stream("split").generator())
        classifier_type = WeightedSplitConformalClassifier if self.split_strategy == "selective" else SplitConformalClassifier
        self.closed_set_ = classifier_type(n_neighbors=self.n_neighbors, metric=self.metric,
                                           aps=ApsConfig(randomized=self.randomized_aps),
                                           smoothing_noise=self.smoothing_noise)
        self.closed_set_.fit(data, self.split_, self.label_space_, source.stream("smooth").generator())
        self.tester_ = None
        if not closed_set_only:
            self.tester_ = GoodTuringTester(data, unseen_variant=self.unseen_variant, seen_variant=self.seen_variant,
                                            beta=self.beta, n_neighbors=self.lof_neighbors)
        logger.info(f"Fitted {self.split_strategy} split with {self.split_.train.size} training and "
                    f"{self.split_.calibration.size} calibration points, {len(self.label_space_)} labels")
        return self

    def closed_pvalues(self, features: np.ndarray, source: RandomSource) -> np.ndarray:
        return self.closed_set_.pvalues(features, source.stream("aps").generator())

    def pvalues(self, features: np.ndarray, source: RandomSource) -> CgtcPValues:
        """Closed-set, unseen and seen p-values of every query."""
        if self.tester_ is None:
            raise ValueError("classifier was fitted without the Good-Turing tests")
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        closed = self.closed_pvalues(features, source)
        return CgtcPValues(
            label_space=self.closed_set_.label_space_,
            closed=closed,
            psi_unseen=self.tester_.unseen(features, source.stream("rgt", 0).generator()),
            psi_seen=self.tester_.seen(features, source.stream("rgt", 1).generator()),
        )

    def predict(self, features: np.ndarray, allocation: AlphaAllocation, source: RandomSource) -> List[PredictionSet]:
        return self.pvalues(features, source).predict(allocation)

    def predict_closed(self, features: np.ndarray, alpha: float, source: RandomSource) -> List[PredictionSet]:
        """Standard conformal sets over the observed labels, without the joker."""
        pvalues = self.closed_pvalues(np.atleast_2d(np.asarray(features, dtype=float)), source)
        return [PredictionSet(seen) for seen in self.closed_set_.sets_from_pvalues(pvalues, alpha)]

    def components(self, source: RandomSource) -> CgtcComponents:
        """Per-query providers backed by this fitted classifier."""
        def closed_set(x, alpha_class):
            return self.predict_closed(x, alpha_class, source)[0].seen

        return CgtcComponents(
            closed_set=closed_set,
            psi_unseen=lambda x: float(self.tester_.unseen(np.atleast_2d(x), source.stream("rgt", 0).generator())[0]),
            psi_seen=lambda x: float(self.tester_.seen(np.atleast_2d(x), source.stream("rgt", 1).generator())[0]),
        )


def fold_assignments(n: int, folds: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Random partition of range(n) into folds of at least TUNING_MIN_FOLD_SIZE points."""
    feasible = n // TUNING_MIN_FOLD_SIZE
    if feasible < 2:
        raise ValueError(f"infeasible tuning: {n} samples cannot form 2 folds of {TUNING_MIN_FOLD_SIZE}")
    if folds > feasible:
        logger.warning(f"Reducing folds from {folds} to {feasible} so each fold has at least "
                       f"{TUNING_MIN_FOLD_SIZE} points")
        folds = feasible
    return [np.sort(fold) for fold in np.array_split(rng.permutation(n), folds)]


def allocation_losses(data: LabeledDataset, alpha: float, cfg: TuningConfig, source: RandomSource,
                      estimator: Optional[ConformalGoodTuringClassifier] = None) -> Dict[Tuple[float, float], float]:
    """
    Cross-validated mean loss of every (alpha_seen, alpha_class) grid point.

    Each fold is held out once; the classifier is fitted on the remaining folds and its
    p-values are computed once, then thresholded for every grid point.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    grid = cfg.grid(alpha)
    if not grid:
        raise ValueError(f"infeasible allocation grid for alpha={alpha}")
    estimator = estimator or ConformalGoodTuringClassifier()

    folds = fold_assignments(data.n, cfg.folds, source.stream("folds").generator())
    totals = np.zeros(len(grid))
    for f, held_out in enumerate(folds):
        reference = data.subset(np.setdiff1d(np.arange(data.n), held_out))
        validation = data.subset(held_out)
        classifier = estimator.clone().fit(reference, source.stream("fold", f))
        pvalues = classifier.pvalues(validation.features, source.stream("fold-pvalues", f))

        baseline = np.count_nonzero(pvalues.closed > alpha, axis=1)
        empty = baseline == 0
        if np.any(empty):
            logger.debug(f"Fold {f}: {int(empty.sum())} empty baseline sets counted as size 1")
        baseline = np.where(empty, 1, baseline)
        seen = np.isin(validation.labels, np.fromiter(classifier.label_space_, dtype=np.int64))

        for g, (alpha_seen, alpha_class) in enumerate(grid):
            allocation = AlphaAllocation.from_budget(alpha, alpha_class, alpha_seen)
            sizes, joker = pvalues.sizes(allocation)
            loss = cfg.lambda_ * sizes / baseline + (1.0 - cfg.lambda_) * (joker & seen)
            totals[g] += loss.mean()
    return {pair: total / len(folds) for pair, total in zip(grid, totals)}


def tune_allocation(data: LabeledDataset, alpha: float, cfg: TuningConfig, source: RandomSource,
                    estimator: Optional[ConformalGoodTuringClassifier] = None) -> AlphaAllocation:
    """
    Data-driven allocation of the significance budget by K-fold cross-validation.

    Args:
        data: Reference data
        alpha: Total budget
        cfg: Tuning options
        source: Randomness for folds, splits and p-values
        estimator: Unfitted classifier whose settings are used inside each fold

    Returns:
        The allocation with the smallest mean loss; ties go to the larger alpha_class,
        then the larger alpha_unseen
    """
    losses = allocation_losses(data, alpha, cfg, source, estimator)
    best_loss = min(losses.values())
    tied = [pair for pair, loss in losses.items() if loss <= best_loss + SUM_TOLERANCE]
    # Larger alpha_class first, then larger alpha_unseen (smaller alpha_seen)
    alpha_seen, alpha_class = max(tied, key=lambda pair: (pair[1], -pair[0]))
    allocation = AlphaAllocation.from_budget(alpha, alpha_class, alpha_seen)
    logger.info(f"Tuned allocation: class={allocation.alpha_class:.4f}, unseen={allocation.alpha_unseen:.4f}, "
                f"seen={allocation.alpha_seen:.4f} (loss {best_loss:.4f})")
    return allocation
