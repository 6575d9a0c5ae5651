"""
Probabilistic k-nearest-neighbor classifier with inverse-distance weights.
"""
import logging
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from config import DISTANCE_FLOOR, KNN_METRIC, KNN_NEIGHBORS
from conformal.data_core import LabeledDataset
from models.base_model import BaseClassifier, check_query

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine")


class KnnClassifier(BaseClassifier):
    """
    k-nearest-neighbor classifier.

    Each neighbor votes for its class with weight 1/max(distance, 1e-12), so an
    exact match dominates every other neighbor.
    """

    def __init__(self, n_neighbors: int = KNN_NEIGHBORS, metric: str = KNN_METRIC):
        if n_neighbors < 1:
            raise ValueError(f"n_neighbors must be at least 1, got {n_neighbors}")
        if metric not in METRICS:
            raise ValueError(f"Unsupported metric: {metric}. Choose from {', '.join(METRICS)}")
        self.n_neighbors = n_neighbors
        self.metric = metric
        self.classes_: Optional[np.ndarray] = None
        self.k_: Optional[int] = None

    def fit(self, features: np.ndarray, labels: np.ndarray) -> "KnnClassifier":
        features = np.asarray(features, dtype=float)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("empty training data")
        if features.shape[0] != labels.shape[0]:
            raise ValueError("features and labels differ in length")

        self._features = features
        self.classes_ = np.unique(labels)
        self._codes = np.searchsorted(self.classes_, labels)
        self.k_ = min(self.n_neighbors, features.shape[0])
        return self

    @property
    def dim(self) -> int:
        return int(self._features.shape[1])

    def distances(self, features: np.ndarray) -> np.ndarray:
        distances = cdist(features, self._features, metric=self.metric)
        if self.metric == "cosine":
            # Zero vectors have undefined cosine distance
            distances = np.clip(np.nan_to_num(distances, nan=1.0), 0.0, None)
        return distances

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        if self.classes_ is None:
            raise ValueError("model is not fitted")
        features = check_query(features, self.dim)
        m = features.shape[0]
        probs = np.zeros((m, len(self.classes_)))
        if m == 0:
            return probs

        distances = self.distances(features)
        neighbors = np.argsort(distances, axis=1, kind="stable")[:, : self.k_]
        weights = 1.0 / np.maximum(np.take_along_axis(distances, neighbors, axis=1), DISTANCE_FLOOR)
        rows = np.repeat(np.arange(m), self.k_)
        np.add.at(probs, (rows, self._codes[neighbors].reshape(-1)), weights.reshape(-1))
        probs /= probs.sum(axis=1, keepdims=True)
        return probs


def knn_fit(train: LabeledDataset, k: int = KNN_NEIGHBORS, metric: str = KNN_METRIC) -> KnnClassifier:
    """
    Fit a k-nearest-neighbor classifier on a labeled dataset.

    Args:
        train: Training data
        k: Neighbor count, clamped to the training size
        metric: "euclidean" or "cosine"

    Returns:
        Fitted KnnClassifier
    """
    if train.n == 0:
        raise ValueError("empty training data")
    return KnnClassifier(n_neighbors=k, metric=metric).fit(train.features, train.labels)


def knn_predict_proba(model: KnnClassifier, x: np.ndarray) -> np.ndarray:
    """Probability vector for a single query, ordered as `model.classes_`."""
    return model.predict_proba(np.asarray(x, dtype=float).reshape(1, -1))[0]
