"""
Base classes for the in-tree predictive models.
"""
from abc import ABC, abstractmethod

import numpy as np


class BaseClassifier(ABC):
    """Abstract base class for probabilistic classifiers."""

    @abstractmethod
    def fit(self, features: np.ndarray, labels: np.ndarray) -> "BaseClassifier":
        """
        Fit the classifier.

        Args:
            features: Training features of shape (n, d)
            labels: Integer labels of shape (n,)

        Returns:
            The fitted classifier
        """
        pass

    @abstractmethod
    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """
        Estimate class probabilities.

        Args:
            features: Query features of shape (m, d)

        Returns:
            Array of shape (m, n_classes) whose rows sum to 1, columns ordered as `classes_`
        """
        pass


class BaseOneClassScorer(ABC):
    """Abstract base class for one-class conformity scorers."""

    @abstractmethod
    def fit(self, features: np.ndarray) -> "BaseOneClassScorer":
        """
        Fit the scorer on reference features.

        Args:
            features: Reference features of shape (n, d)

        Returns:
            The fitted scorer
        """
        pass

    @abstractmethod
    def score_samples(self, features: np.ndarray) -> np.ndarray:
        """
        Conformity scores, larger meaning more typical of the reference data.

        Args:
            features: Query features of shape (m, d)

        Returns:
            Array of shape (m,)
        """
        pass


def check_query(features, dim: int) -> np.ndarray:
    """Coerce queries to a 2-D float array and check their dimension."""
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    if features.shape[1] != dim:
        raise ValueError(f"dimension mismatch: expected {dim} features, got {features.shape[1]}")
    return features
