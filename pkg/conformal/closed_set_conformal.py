"""
Split-conformal classification over a finite label space with adaptive (APS) scores.
"""
import logging
import math
from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, Optional, Sequence

import numpy as np

from config import KNN_METRIC, KNN_NEIGHBORS, SMOOTHING_NOISE
from conformal.data_core import (
    Label,
    LabeledDataset,
    PredictionSet,
    frequency_profile,
    observed_label_space,
)
from models.knn_classifier import KnnClassifier

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ApsConfig:
    """Adaptive score options; the randomized score subtracts U times the label's probability."""
    randomized: bool = True


@dataclass(frozen=True)
class CalibrationRecord:
    """Nonconformity scores of the calibration points with their labels."""
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float).reshape(-1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if scores.shape != labels.shape:
            raise ValueError("scores and labels differ in length")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.scores.shape[0])


@dataclass(frozen=True)
class SplitAssignment:
    """
    Partition of sample indices into training and calibration parts.

    Attributes:
        train: Sorted training indices
        calibration: Sorted calibration indices
        policy: Inclusion policy that generated a selective split, None for a random split
    """
    train: np.ndarray
    calibration: np.ndarray
    policy: Optional[object] = None

    def __post_init__(self):
        train = np.sort(np.asarray(self.train, dtype=np.int64).reshape(-1))
        calibration = np.sort(np.asarray(self.calibration, dtype=np.int64).reshape(-1))
        if np.intersect1d(train, calibration).size:
            raise ValueError("training and calibration indices overlap")
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "calibration", calibration)

    @property
    def n(self) -> int:
        return int(self.train.size + self.calibration.size)

    def check_partition(self, n: int) -> None:
        """Raise unless the split covers exactly the indices 0..n-1."""
        combined = np.sort(np.concatenate([self.train, self.calibration]))
        if combined.size != n or not np.array_equal(combined, np.arange(n)):
            raise ValueError(f"split does not partition {n} samples")


def random_split(n: int, n_cal: int, rng: np.random.Generator) -> SplitAssignment:
    """
    Uniformly random split with exactly n_cal calibration points.

    Args:
        n: Sample size
        n_cal: Calibration size, 0 <= n_cal <= n
        rng: Random generator

    Returns:
        SplitAssignment without a policy
    """
    if not 0 <= n_cal <= n:
        raise ValueError(f"n_cal must lie in [0, {n}], got {n_cal}")
    permutation = rng.permutation(n)
    return SplitAssignment(train=permutation[n_cal:], calibration=permutation[:n_cal])


def aps_score_matrix(probs: np.ndarray, uniforms: Optional[np.ndarray] = None) -> np.ndarray:
    """
    APS scores of every candidate column.

    Entry (i, c) is the total probability of classes ranked at or above c in row i,
    ties broken by column index. With `uniforms`, U_i * probs[i, c] is subtracted.

    Args:
        probs: Probability matrix of shape (m, C)
        uniforms: Optional per-row uniforms of shape (m,)

    Returns:
        Score matrix of shape (m, C)
    """
    probs = np.asarray(probs, dtype=float)
    m, n_classes = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")
    cumulative = np.cumsum(np.take_along_axis(probs, order, axis=1), axis=1)
    scores = np.empty_like(probs)
    np.put_along_axis(scores, order, cumulative, axis=1)
    if uniforms is not None:
        scores = scores - np.asarray(uniforms, dtype=float).reshape(m, 1) * probs
    return scores


def aps_score(probs: Sequence[float], label_index: int, cfg: ApsConfig, rng: np.random.Generator) -> float:
    """
    Adaptive score of one label.

    Args:
        probs: Probability vector
        label_index: Position of the label in `probs`
        cfg: Score options
        rng: Random generator (used only when randomized)

    Returns:
        Descending cumulative probability through the label's rank
    """
    probs = np.asarray(probs, dtype=float).reshape(1, -1)
    if not 0 <= label_index < probs.shape[1]:
        raise IndexError(f"label index {label_index} outside 0..{probs.shape[1] - 1}")
    uniforms = rng.uniform(size=1) if cfg.randomized else None
    return float(aps_score_matrix(probs, uniforms)[0, label_index])


def calibrate_threshold(scores: Sequence[float], alpha: float) -> float:
    """
    The ceil((1+n)(1-alpha))-th smallest calibration score, or +inf when that rank exceeds n.
    """
    scores = np.sort(np.asarray(scores, dtype=float))
    n = scores.size
    if n == 0:
        raise ValueError("empty calibration scores")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    rank = math.ceil((1 + n) * (1 - alpha) - 1e-9)
    if rank > n:
        return math.inf
    return float(scores[max(rank, 1) - 1])


def conformal_pvalue(test_score: float, cal_scores: Sequence[float]) -> float:
    """(1 + #{i: S_i >= S_test}) / (1 + n)."""
    cal_scores = np.asarray(cal_scores, dtype=float)
    return (1.0 + np.count_nonzero(cal_scores >= test_score)) / (1.0 + cal_scores.size)


def rank_pvalues(test_scores: np.ndarray, cal_scores: np.ndarray) -> np.ndarray:
    """Vectorized `conformal_pvalue` for an array of test scores."""
    sorted_scores = np.sort(np.asarray(cal_scores, dtype=float))
    n = sorted_scores.size
    at_least = n - np.searchsorted(sorted_scores, test_scores, side="left")
    return (1.0 + at_least) / (1.0 + n)


def smoothed_unseen_probability(n_train: int, n_singleton: int, n_unseen: int) -> float:
    """(1 + n_singleton) / ((1 + n_train) * n_unseen)."""
    return (1.0 + n_singleton) / ((1.0 + n_train) * n_unseen)


def smooth_unseen_matrix(probs: np.ndarray, n_unseen: int, n_train: int, n_singleton: int,
                         rng: Optional[np.random.Generator], noise_scale: float = SMOOTHING_NOISE) -> np.ndarray:
    """
    Append smoothed columns for calibration labels absent from training, then renormalize.

    Args:
        probs: Probabilities over training classes, shape (m, C)
        n_unseen: Number of appended labels
        n_train: Training size
        n_singleton: Number of training labels seen once
        rng: Random generator for the noise (None means no noise)
        noise_scale: Noise upper bound as a fraction of the smoothed probability

    Returns:
        Array of shape (m, C + n_unseen) with rows summing to 1
    """
    probs = np.asarray(probs, dtype=float)
    if n_unseen == 0:
        return probs
    p_unseen = smoothed_unseen_probability(n_train, n_singleton, n_unseen)
    extra = np.full((probs.shape[0], n_unseen), p_unseen)
    if rng is not None and noise_scale > 0:
        extra = extra + rng.uniform(0.0, p_unseen * noise_scale, size=extra.shape)
    extended = np.hstack([probs, extra])
    return extended / extended.sum(axis=1, keepdims=True)


def smooth_unseen_probs(probs: Sequence[float], cal_labels_unseen: Iterable[Label], n_train: int,
                        n_singleton: int, rng: Optional[np.random.Generator],
                        noise_scale: float = SMOOTHING_NOISE) -> np.ndarray:
    """Single-vector form of `smooth_unseen_matrix`; one entry per unseen label, in sorted order."""
    n_unseen = len(set(cal_labels_unseen))
    return smooth_unseen_matrix(np.asarray(probs, dtype=float).reshape(1, -1), n_unseen,
                                n_train, n_singleton, rng, noise_scale)[0]


class SplitConformalClassifier:
    """
    Split-conformal classifier over a fixed candidate label space.

    The base model is trained on the training part of a split and APS scores of the
    calibration part give the conformal p-value of every candidate label.
    """

    def __init__(self, n_neighbors: int = KNN_NEIGHBORS, metric: str = KNN_METRIC,
                 aps: ApsConfig = ApsConfig(), smoothing_noise: float = SMOOTHING_NOISE):
        self.n_neighbors = n_neighbors
        self.metric = metric
        self.aps = aps
        self.smoothing_noise = smoothing_noise

    def fit(self, data: LabeledDataset, split: SplitAssignment, label_space: Iterable[Label],
            rng: np.random.Generator, model: Optional[KnnClassifier] = None) -> "SplitConformalClassifier":
        """
        Train on the split's training part and score its calibration part.

        Args:
            data: Full labeled sample
            split: Train/calibration partition of `data`
            label_space: Candidate labels of the prediction sets
            rng: Random generator for smoothing noise and score randomization
            model: Optional classifier already fitted on the training part

        Returns:
            self
        """
        split.check_partition(data.n)
        train = data.subset(split.train)
        calibration = data.subset(split.calibration)

        self.model_ = model if model is not None else KnnClassifier(self.n_neighbors, self.metric).fit(
            train.features, train.labels)
        self.label_space_ = np.array(sorted(int(y) for y in label_space), dtype=np.int64)
        train_classes = np.asarray(self.model_.classes_, dtype=np.int64)
        extra = np.setdiff1d(np.union1d(self.label_space_, calibration.labels), train_classes)
        self.columns_ = np.concatenate([train_classes, extra])
        self._column_of = {int(label): i for i, label in enumerate(self.columns_)}
        self._candidate_columns = np.array([self._column_of[int(y)] for y in self.label_space_], dtype=np.int64)
        self._n_train = train.n
        self._n_singleton = frequency_profile(train.labels).M(1)
        if extra.size:
            logger.debug(f"Smoothing probabilities of {extra.size} labels absent from training")

        cal_scores = np.zeros(0)
        if calibration.n:
            probs = self._probabilities(calibration.features, rng)
            uniforms = rng.uniform(size=calibration.n) if self.aps.randomized else None
            columns = np.array([self._column_of[int(y)] for y in calibration.labels], dtype=np.int64)
            cal_scores = np.take_along_axis(aps_score_matrix(probs, uniforms), columns[:, None], axis=1)[:, 0]
        self.calibration_ = CalibrationRecord(cal_scores, calibration.labels)
        self.split_ = split
        self._sorted_scores = np.sort(cal_scores)
        return self

    def _probabilities(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        probs = self.model_.predict_proba(features)
        return smooth_unseen_matrix(probs, self.columns_.size - probs.shape[1], self._n_train,
                                    self._n_singleton, rng, self.smoothing_noise)

    def candidate_scores(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """APS scores of every candidate label, shape (m, |label space|)."""
        probs = self._probabilities(features, rng)
        uniforms = rng.uniform(size=probs.shape[0]) if self.aps.randomized else None
        return aps_score_matrix(probs, uniforms)[:, self._candidate_columns]

    def pvalues_from_scores(self, scores: np.ndarray) -> np.ndarray:
        n = self._sorted_scores.size
        at_least = n - np.searchsorted(self._sorted_scores, scores, side="left")
        return (1.0 + at_least) / (1.0 + n)

    def pvalues(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Conformal p-values of every candidate label, shape (m, |label space|)."""
        return self.pvalues_from_scores(self.candidate_scores(features, rng))

    def sets_from_pvalues(self, pvalues: np.ndarray, alpha: float) -> List[FrozenSet[Label]]:
        keep = np.asarray(pvalues) > alpha
        return [frozenset(int(y) for y in self.label_space_[row]) for row in keep]

    def predict(self, features: np.ndarray, alpha: float, rng: np.random.Generator) -> List[PredictionSet]:
        """Closed-set prediction sets {y : p(y) > alpha}, never containing the joker."""
        return [PredictionSet(seen) for seen in self.sets_from_pvalues(self.pvalues(features, rng), alpha)]


def closed_set_predict(model: KnnClassifier, cal: CalibrationRecord, x: np.ndarray, alpha: float,
                       label_space: Iterable[Label], cfg: ApsConfig, rng: np.random.Generator) -> PredictionSet:
    """
    Closed-set prediction set for a single query.

    Args:
        model: Classifier whose class index covers `label_space`
        cal: Calibration scores
        x: Query features
        alpha: Significance level
        label_space: Candidate labels
        cfg: Score options
        rng: Random generator

    Returns:
        PredictionSet of labels with conformal p-value above alpha
    """
    probs = model.predict_proba(np.asarray(x, dtype=float).reshape(1, -1))
    column_of = {int(label): i for i, label in enumerate(model.classes_)}
    candidates = sorted(int(y) for y in label_space)
    missing = [y for y in candidates if y not in column_of]
    if missing:
        raise ValueError(f"labels {missing} are not in the model's class index")
    uniforms = rng.uniform(size=1) if cfg.randomized else None
    scores = aps_score_matrix(probs, uniforms)[0]
    candidate_scores = np.array([scores[column_of[y]] for y in candidates])
    pvalues = rank_pvalues(candidate_scores, cal.scores)
    return PredictionSet(frozenset(y for y, p in zip(candidates, pvalues) if p > alpha))


def plug_in_predict(data: LabeledDataset, x: np.ndarray, alpha: float, split: SplitAssignment,
                    cfg: ApsConfig, rng: np.random.Generator, n_neighbors: int = KNN_NEIGHBORS,
                    metric: str = KNN_METRIC) -> PredictionSet:
    """
    Split-conformal prediction set over the observed label space of all n samples.
    """
    classifier = SplitConformalClassifier(n_neighbors=n_neighbors, metric=metric, aps=cfg)
    classifier.fit(data, split, observed_label_space(data.labels), rng)
    return classifier.predict(np.asarray(x, dtype=float).reshape(1, -1), alpha, rng)[0]
