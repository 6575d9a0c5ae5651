"""
Local outlier factor one-class scorer.
"""
import logging
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from config import LOF_NEIGHBORS
from models.base_model import BaseOneClassScorer, check_query

logger = logging.getLogger(__name__)

LRD_EPSILON = 1e-10
QUERY_CHUNK = 2048


class LocalOutlierFactor(BaseOneClassScorer):
    """
    Novelty-mode local outlier factor.

    Neighborhoods include every reference point at exactly the k-distance.
    `score_samples` returns -LOF so larger means more conforming.
    """

    def __init__(self, n_neighbors: int = LOF_NEIGHBORS, metric: str = "euclidean"):
        if n_neighbors < 1:
            raise ValueError(f"n_neighbors must be at least 1, got {n_neighbors}")
        self.n_neighbors = n_neighbors
        self.metric = metric
        self.k_: Optional[int] = None

    def fit(self, features: np.ndarray) -> "LocalOutlierFactor":
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[0] < 2:
            raise ValueError("insufficient reference data")

        self._features = features
        self.k_ = min(self.n_neighbors, features.shape[0] - 1)

        distances = cdist(features, features, metric=self.metric)
        np.fill_diagonal(distances, np.inf)
        self._k_distance = np.sort(distances, axis=1)[:, self.k_ - 1]
        self._lrd = self._reachability_density(distances, self._k_distance)
        return self

    @property
    def dim(self) -> int:
        return int(self._features.shape[1])

    def _reachability_density(self, distances: np.ndarray, k_distance: np.ndarray) -> np.ndarray:
        neighborhood = distances <= k_distance[:, None]
        reach = np.maximum(distances, self._k_distance[None, :])
        mean_reach = np.where(neighborhood, reach, 0.0).sum(axis=1) / neighborhood.sum(axis=1)
        return 1.0 / (mean_reach + LRD_EPSILON)

    def local_outlier_factor(self, features: np.ndarray) -> np.ndarray:
        """LOF of each query relative to the reference data."""
        if self.k_ is None:
            raise ValueError("scorer is not fitted")
        features = check_query(features, self.dim)
        lof = np.empty(features.shape[0])
        for start in range(0, features.shape[0], QUERY_CHUNK):
            chunk = features[start:start + QUERY_CHUNK]
            distances = cdist(chunk, self._features, metric=self.metric)
            k_distance = np.sort(distances, axis=1)[:, self.k_ - 1]
            lrd = self._reachability_density(distances, k_distance)
            neighborhood = distances <= k_distance[:, None]
            neighbor_lrd = np.where(neighborhood, self._lrd[None, :], 0.0).sum(axis=1) / neighborhood.sum(axis=1)
            lof[start:start + QUERY_CHUNK] = neighbor_lrd / lrd
        return lof

    def score_samples(self, features: np.ndarray) -> np.ndarray:
        return -self.local_outlier_factor(features)


def lof_fit(features: np.ndarray, k: int = LOF_NEIGHBORS) -> LocalOutlierFactor:
    """
    Fit a local outlier factor scorer.

    Args:
        features: At least two reference points
        k: Neighbor count, clamped to n - 1

    Returns:
        Fitted LocalOutlierFactor
    """
    return LocalOutlierFactor(n_neighbors=k).fit(features)


def lof_score(scorer: LocalOutlierFactor, x: np.ndarray) -> float:
    """Conformity score -LOF(x) for a single query."""
    return float(scorer.score_samples(np.asarray(x, dtype=float).reshape(1, -1))[0])
