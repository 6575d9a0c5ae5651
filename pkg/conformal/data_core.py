"""
Core data containers, label frequency accounting and seeded randomness.
"""
import csv
import logging
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Hashable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# Labels are integer surrogates; display strings live in LabeledDataset.label_names.
Label = int


class DatasetFormatError(ValueError):
    """Raised when a dataset or query file cannot be parsed."""

    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


@dataclass(frozen=True)
class LabeledDataset:
    """
    Feature matrix paired with a label sequence.

    Attributes:
        features: Array of shape (n, d)
        labels: Integer label surrogates of shape (n,)
        label_names: Display string for every surrogate id (index = id)
    """
    features: np.ndarray
    labels: np.ndarray
    label_names: Tuple[str, ...] = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim == 1:
            features = features.reshape(len(labels), -1) if len(labels) else features.reshape(0, 0)
        if features.ndim != 2:
            raise ValueError(f"features must be a matrix, got {features.ndim} dimensions")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"features and labels differ in length: {features.shape[0]} != {labels.shape[0]}"
            )
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_names", tuple(self.label_names))

    @classmethod
    def from_raw(cls, features: Sequence, raw_labels: Sequence[Hashable]) -> "LabeledDataset":
        """
        Build a dataset from arbitrary hashable labels, interning them in order of first appearance.
        """
        ids: Dict[Hashable, int] = {}
        encoded = []
        for raw in raw_labels:
            if raw not in ids:
                ids[raw] = len(ids)
            encoded.append(ids[raw])
        names = tuple(str(raw) for raw in ids)
        return cls(np.asarray(features, dtype=float), np.asarray(encoded, dtype=np.int64), names)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def name_of(self, label: Label) -> str:
        """Display string for a label surrogate."""
        if 0 <= label < len(self.label_names):
            return self.label_names[label]
        return str(label)

    def subset(self, indices: Union[Sequence[int], np.ndarray]) -> "LabeledDataset":
        """Rows at the given indices, sharing the label table."""
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.label_names)


@dataclass(frozen=True)
class FrequencyProfile:
    """
    Sample frequency profile of a label sequence.

    Attributes:
        m: Sparse map k -> M_k, the number of distinct labels seen exactly k times (k >= 1)
        counts: Map label -> N(y), only labels with N(y) >= 1
        n: Sequence length
    """
    m: Dict[int, int]
    counts: Dict[Label, int]
    n: int

    def M(self, k: int) -> int:
        # M_0 is not observable from the data
        if k <= 0:
            return 0
        return self.m.get(k, 0)

    def count(self, label: Label) -> int:
        return self.counts.get(int(label), 0)

    def observed_frequencies(self) -> List[int]:
        """Sorted set K_n = {k >= 1 : M_k > 0}."""
        return sorted(k for k, m_k in self.m.items() if m_k > 0)

    def labels_with_count(self, k: int) -> List[Label]:
        return sorted(label for label, c in self.counts.items() if c == k)

    @property
    def distinct(self) -> int:
        return len(self.counts)


def frequency_profile(labels: Iterable[Label]) -> FrequencyProfile:
    """
    Compute the frequency profile of a label sequence.

    Args:
        labels: Label sequence (may be empty)

    Returns:
        FrequencyProfile with M_k and per-label counts
    """
    counts = Counter(int(label) for label in labels)
    m = Counter(counts.values())
    return FrequencyProfile(m=dict(sorted(m.items())), counts=dict(counts), n=sum(counts.values()))


def label_count(label: Label, profile: FrequencyProfile) -> int:
    """Number of occurrences of a label, 0 if unseen."""
    return profile.count(label)


def observed_label_space(labels: Iterable[Label]) -> FrozenSet[Label]:
    """Set of distinct observed labels."""
    return frozenset(int(label) for label in labels)


def position_counts(labels: np.ndarray) -> np.ndarray:
    """N(Y_i; Y_{1:n}) for every position i."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return counts[inverse.reshape(-1)]


@dataclass(frozen=True)
class PredictionSet:
    """
    A finite set of seen labels, optionally augmented with the joker.

    The joker stands for every label absent from the reference data.
    """
    seen: FrozenSet[Label] = field(default_factory=frozenset)
    joker: bool = False

    def __len__(self) -> int:
        return len(self.seen) + (1 if self.joker else 0)

    def __contains__(self, label: Label) -> bool:
        return int(label) in self.seen

    def render(self, names: Optional[Sequence[str]] = None) -> List[str]:
        """Display tokens, seen labels sorted, joker as `*`."""
        tokens = [names[y] if names is not None and y < len(names) else str(y) for y in sorted(self.seen)]
        if self.joker:
            tokens.append("*")
        return tokens


def _stream_key(name: Union[str, int]) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


@dataclass(frozen=True)
class RandomSource:
    """
    Seeded, splittable randomness.

    The same (seed, stream) always reproduces identical draws. Child streams are
    derived with `stream`, so repetitions can run in any order or process.
    """
    seed: int
    stream_id: Tuple[int, ...] = ()

    def stream(self, name: Union[str, int], *indices: int) -> "RandomSource":
        """
        Derive a named child stream.

        Args:
            name: Stream name (e.g. "dp", "split", "rgt")
            indices: Optional integer qualifiers such as a repetition index

        Returns:
            Independent RandomSource
        """
        key = (_stream_key(name),) + tuple(int(i) for i in indices)
        return RandomSource(self.seed, self.stream_id + key)

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream_id)
        return np.random.default_rng(sequence)


def load_dataset_csv(path: Union[str, Path]) -> LabeledDataset:
    """
    Read a dataset CSV with header `label,f0,...,f{d-1}`.

    Args:
        path: CSV file path

    Returns:
        LabeledDataset with labels interned in order of first appearance

    Raises:
        DatasetFormatError: On a malformed header or row (1-based file row)
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DatasetFormatError(1, "missing header")
        if not header or header[0].strip() != "label":
            raise DatasetFormatError(1, "first column must be 'label'")
        dim = len(header) - 1
        raw_labels: List[str] = []
        rows: List[List[float]] = []
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DatasetFormatError(row_number, f"expected {dim + 1} columns, got {len(row)}")
            try:
                rows.append([float(value) for value in row[1:]])
            except ValueError as e:
                raise DatasetFormatError(row_number, f"invalid feature value ({e})") from e
            raw_labels.append(row[0].strip())

    features = np.asarray(rows, dtype=float).reshape(len(rows), dim)
    dataset = LabeledDataset.from_raw(features, raw_labels)
    logger.info(f"Loaded {dataset.n} rows with {dim} features and {len(dataset.label_names)} labels from {path}")
    return dataset


def save_dataset_csv(dataset: LabeledDataset, path: Union[str, Path]) -> Path:
    """Write a dataset CSV; floats are written with repr so files are byte-stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(dataset.dim)])
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([dataset.name_of(int(label))] + [repr(float(value)) for value in row])
    logger.info(f"Saved {dataset.n} rows to {path}")
    return path


def parse_feature_row(text: str, row_number: int, dim: Optional[int] = None) -> np.ndarray:
    """Parse one comma-separated feature row."""
    try:
        values = [float(value) for value in text.split(",")]
    except ValueError as e:
        raise DatasetFormatError(row_number, f"invalid feature value ({e})") from e
    if dim is not None and len(values) != dim:
        raise DatasetFormatError(row_number, f"expected {dim} features, got {len(values)}")
    return np.asarray(values, dtype=float)


def load_features_csv(path: Union[str, Path], dim: Optional[int] = None) -> np.ndarray:
    """
    Read query features, one comma-separated row per query.

    A first row of the form `f0,f1,...` is treated as a header.
    """
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as f:
        for row_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if row_number == 1 and line.startswith("f0"):
                continue
            row = parse_feature_row(line, row_number, dim)
            if rows and len(row) != len(rows[0]):
                raise DatasetFormatError(row_number, f"expected {len(rows[0])} features, got {len(row)}")
            rows.append(row)
    if not rows:
        return np.zeros((0, dim or 0))
    return np.vstack(rows)
