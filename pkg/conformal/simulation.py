"""
Dirichlet-process data generator, evaluation metrics and the experiment runner.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import BIN_EDGES, BIN_NAMES, DP_DIM, DP_SIGMA2
from conformal.data_core import (
    FrequencyProfile,
    Label,
    LabeledDataset,
    PredictionSet,
    RandomSource,
    frequency_profile,
    load_dataset_csv,
    observed_label_space,
)
from conformal.open_set import (
    AlphaAllocation,
    ConformalGoodTuringClassifier,
    TuningConfig,
    cardinality,
    tune_allocation,
)
from conformal.settings import ExperimentOptions, ExperimentSpec

logger = logging.getLogger(__name__)

BASE_DISTRIBUTIONS = ("uniform", "normal")


@dataclass(frozen=True)
class DpConfig:
    """
    Dirichlet-process label model with Gaussian features around each label's atom.

    Attributes:
        theta: Concentration parameter (math.inf makes every label new)
        n: Sample count
        dim: Feature dimension
        sigma2: Feature noise variance
        base: Base distribution of the atoms, "uniform" on (0, 1) or standard "normal"
    """
    theta: float
    n: int = 0
    dim: int = DP_DIM
    sigma2: float = DP_SIGMA2
    base: str = "uniform"

    def __post_init__(self):
        if not self.theta >= 0:
            raise ValueError(f"theta must be nonnegative, got {self.theta}")
        if self.n < 0:
            raise ValueError(f"n must be nonnegative, got {self.n}")
        if self.dim < 1:
            raise ValueError(f"dim must be at least 1, got {self.dim}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.base not in BASE_DISTRIBUTIONS:
            raise ValueError(f"Unsupported base distribution: {self.base}. Choose from {', '.join(BASE_DISTRIBUTIONS)}")


class DirichletProcessSimulator:
    """
    Sequential Chinese-restaurant sampler.

    Label ids are assigned in order of creation and every label keeps its base draw
    (the atom) as the mean of its features.
    """

    def __init__(self, cfg: DpConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.atoms: List[float] = []
        self.labels: List[int] = []
        self._features = np.zeros((0, cfg.dim))

    def _new_atom(self) -> int:
        if self.cfg.base == "uniform":
            atom = float(self.rng.uniform(0.0, 1.0))
        else:
            atom = float(self.rng.standard_normal())
        self.atoms.append(atom)
        return len(self.atoms) - 1

    def _draw_label(self, reference: Sequence[int]) -> int:
        """Next label given the labels drawn so far: new w.p. theta / (theta + i)."""
        i = len(reference)
        theta = self.cfg.theta
        if i == 0 or math.isinf(theta):
            return self._new_atom()
        if self.rng.uniform() * (theta + i) < theta:
            return self._new_atom()
        # Copying a uniformly chosen earlier draw picks a label proportionally to its count
        return reference[int(self.rng.integers(0, i))]

    def features(self, labels: Sequence[int]) -> np.ndarray:
        means = np.asarray([self.atoms[y] for y in labels], dtype=float).reshape(-1, 1)
        noise = self.rng.standard_normal((len(labels), self.cfg.dim)) * math.sqrt(self.cfg.sigma2)
        return means + noise

    def label_names(self) -> Tuple[str, ...]:
        # repr round-trips exactly, so atoms can be recovered from a saved dataset
        return tuple(repr(atom) for atom in self.atoms)

    def sample(self, n: Optional[int] = None) -> LabeledDataset:
        """Extend the sequence by n draws and return the whole sample."""
        n = self.cfg.n if n is None else n
        start = len(self.labels)
        for _ in range(n):
            self.labels.append(self._draw_label(self.labels))
        new_rows = self.features(self.labels[start:]).reshape(n, self.cfg.dim)
        self._features = np.vstack([self._features, new_rows])
        return LabeledDataset(self._features, np.asarray(self.labels, dtype=np.int64), self.label_names())

    def predictive(self, m: int) -> LabeledDataset:
        """
        m test points, each drawn independently from the law of the next observation
        given the current sample.
        """
        reference = list(self.labels)
        labels = [self._draw_label(reference) for _ in range(m)]
        return LabeledDataset(self.features(labels).reshape(m, self.cfg.dim), np.asarray(labels, dtype=np.int64),
                              self.label_names())


def dp_sample(cfg: DpConfig, rng: np.random.Generator) -> LabeledDataset:
    """Draw cfg.n labeled points from the Dirichlet-process model."""
    return DirichletProcessSimulator(cfg, rng).sample()


def dp_predictive_sample(reference: LabeledDataset, cfg: DpConfig, m: int, rng: np.random.Generator) -> LabeledDataset:
    """
    Test points exchangeable with a sample drawn by `dp_sample`.

    Label atoms are recovered from the reference label names.
    """
    simulator = DirichletProcessSimulator(cfg, rng)
    simulator.atoms = [float(name) for name in reference.label_names]
    simulator.labels = [int(y) for y in reference.labels]
    return simulator.predictive(m)


def finite_label_sample(n_labels: int, n: int, rng: np.random.Generator, dim: int = DP_DIM,
                        sigma2: float = DP_SIGMA2) -> LabeledDataset:
    """
    Balanced sample from a finite label space with atoms on a grid in (0, 1).
    """
    if n_labels < 1:
        raise ValueError(f"n_labels must be at least 1, got {n_labels}")
    atoms = (np.arange(n_labels) + 0.5) / n_labels
    labels = rng.integers(0, n_labels, size=n)
    features = atoms[labels][:, None] + rng.standard_normal((n, dim)) * math.sqrt(sigma2)
    return LabeledDataset(features, labels, tuple(f"{atom:.12g}" for atom in atoms))


def new_label_probability(theta: float, n: int) -> float:
    """theta / (theta + n)."""
    if theta < 0 or n < 0:
        raise ValueError("theta and n must be nonnegative")
    if theta == 0 and n == 0:
        raise ValueError("new-label probability is undefined for theta = n = 0")
    if math.isinf(theta):
        return 1.0
    return theta / (theta + n)


def evaluate_prediction(prediction: PredictionSet, y_true: Label, seen_space) -> bool:
    """Covered when the label is in the set, or the label is new and the joker is present."""
    y_true = int(y_true)
    return y_true in prediction.seen or (y_true not in seen_space and prediction.joker)


def frequency_bin(y_true: Label, profile: FrequencyProfile, edges: Sequence[int] = BIN_EDGES) -> int:
    """
    Frequency bin of the test label: 0 for counts 0 and 1, then one bin per edge.

    With the default edges (2, 6, 21) the bins are [0, 1], [2, 5], [6, 20] and [21, inf).
    """
    count = profile.count(y_true)
    return int(np.searchsorted(np.asarray(edges), count, side="right"))


@dataclass
class ExperimentMetrics:
    """
    Aggregated metrics of one experiment with standard errors.

    `extras` maps new_label_rate, seen_miscoverage, psi_unseen and psi_seen to
    (value, se); stratified coverage is keyed by bin name.
    """
    method: str
    coverage: float
    coverage_se: float
    avg_cardinality: float
    cardinality_se: float
    joker_rate: float
    joker_se: float
    stratified_coverage: Dict[str, float] = field(default_factory=dict)
    stratified_se: Dict[str, float] = field(default_factory=dict)
    stratified_counts: Dict[str, int] = field(default_factory=dict)
    extras: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    allocations: List[Optional[AlphaAllocation]] = field(default_factory=list)

    def rows(self) -> List[Tuple[str, float, float]]:
        """(metric, value, se) rows in a fixed order."""
        rows = [
            ("coverage", self.coverage, self.coverage_se),
            ("size", self.avg_cardinality, self.cardinality_se),
            ("joker", self.joker_rate, self.joker_se),
        ]
        rows += [(name, value, se) for name, (value, se) in self.extras.items()]
        rows += [(f"coverage_{name}", self.stratified_coverage[name], self.stratified_se[name])
                 for name in self.stratified_coverage]
        return rows


@dataclass
class RepetitionResult:
    """Per-test-point outcomes of one repetition."""
    rep: int
    covered: np.ndarray
    sizes: np.ndarray
    joker: np.ndarray
    new: np.ndarray
    bins: np.ndarray
    psi_unseen: np.ndarray
    psi_seen: np.ndarray
    allocation: Optional[AlphaAllocation] = None


def _experiment_data(spec: ExperimentSpec, source: RandomSource) -> Tuple[LabeledDataset, LabeledDataset]:
    if spec.data is not None:
        dataset = load_dataset_csv(spec.data)
        if dataset.n < spec.tests + 2:
            raise ValueError(f"{spec.data} has {dataset.n} rows, need at least {spec.tests + 2}")
        permutation = source.stream("test").generator().permutation(dataset.n)
        n = min(spec.n, dataset.n - spec.tests)
        return dataset.subset(permutation[spec.tests:spec.tests + n]), dataset.subset(permutation[:spec.tests])

    cfg = DpConfig(theta=spec.theta, n=spec.n, dim=spec.dim, sigma2=spec.sigma2, base=spec.base)
    simulator = DirichletProcessSimulator(cfg, source.stream("dp").generator())
    reference = simulator.sample()
    simulator.rng = source.stream("test").generator()
    return reference, simulator.predictive(spec.tests)


def make_classifier(spec: ExperimentOptions, split_strategy: Optional[str] = None) -> ConformalGoodTuringClassifier:
    """Unfitted classifier configured from experiment options; the split defaults to the method's."""
    return ConformalGoodTuringClassifier(
        split_strategy=split_strategy or spec.method.split("-", 1)[1],
        unseen_variant=spec.pvalue,
        seen_variant=spec.seen_pvalue,
        n_neighbors=spec.knn_neighbors,
        metric=spec.metric,
        lof_neighbors=spec.lof_neighbors,
        beta=spec.beta,
        cal_fraction=spec.cal_fraction,
        randomized_aps=spec.randomized_aps,
        smoothing_noise=spec.smoothing_noise,
    )


def allocation_for(spec: ExperimentOptions, reference: LabeledDataset, source: RandomSource,
                   estimator: Optional[ConformalGoodTuringClassifier] = None) -> AlphaAllocation:
    """Fixed allocation from the options, or one tuned on the reference data."""
    if spec.allocation == "tuned":
        cfg = TuningConfig(lambda_=spec.tuning_lambda, folds=spec.folds)
        return tune_allocation(reference, spec.alpha, cfg, source.stream("tune"), estimator or make_classifier(spec))
    alpha_class, alpha_seen = spec.fixed_split()
    return AlphaAllocation.from_budget(spec.alpha, alpha_class, alpha_seen)


def run_repetition(spec: ExperimentSpec, rep: int) -> RepetitionResult:
    """One independent repetition: fresh data, fit, predict, score every test point."""
    source = RandomSource(spec.seed).stream("rep", rep)
    reference, test = _experiment_data(spec, source)
    profile = frequency_profile(reference.labels)
    seen_space = observed_label_space(reference.labels)

    classifier = make_classifier(spec)
    standard = spec.method.startswith("standard")
    classifier.fit(reference, source.stream("fit"), closed_set_only=standard)

    allocation = None
    if standard:
        predictions = classifier.predict_closed(test.features, spec.alpha, source.stream("predict"))
        psi_unseen = psi_seen = np.full(test.n, np.nan)
    else:
        allocation = allocation_for(spec, reference, source)
        pvalues = classifier.pvalues(test.features, source.stream("predict"))
        predictions = pvalues.predict(allocation)
        psi_unseen, psi_seen = pvalues.psi_unseen, pvalues.psi_seen

    labels = test.labels
    return RepetitionResult(
        rep=rep,
        covered=np.array([evaluate_prediction(p, y, seen_space) for p, y in zip(predictions, labels)]),
        sizes=np.array([cardinality(p) for p in predictions], dtype=float),
        joker=np.array([p.joker for p in predictions]),
        new=np.array([int(y) not in seen_space for y in labels]),
        bins=np.array([frequency_bin(y, profile, spec.bin_edges) for y in labels], dtype=np.int64),
        psi_unseen=psi_unseen,
        psi_seen=psi_seen,
        allocation=allocation,
    )


def _mean_and_se(per_rep: List[np.ndarray]) -> Tuple[float, float]:
    """Mean over all points; SE from repetition means, or pooled when there is one repetition."""
    pooled = np.concatenate(per_rep).astype(float)
    if pooled.size == 0 or np.all(np.isnan(pooled)):
        return math.nan, math.nan
    mean = float(np.nanmean(pooled))
    if len(per_rep) > 1:
        rep_means = np.array([np.nanmean(values) for values in per_rep])
        return mean, float(np.std(rep_means, ddof=1) / math.sqrt(len(rep_means)))
    if pooled.size > 1:
        return mean, float(np.nanstd(pooled, ddof=1) / math.sqrt(pooled.size))
    return mean, 0.0


def aggregate(method: str, results: List[RepetitionResult]) -> ExperimentMetrics:
    """Combine repetitions into metrics with standard errors."""
    results = sorted(results, key=lambda r: r.rep)
    coverage = _mean_and_se([r.covered for r in results])
    size = _mean_and_se([r.sizes for r in results])
    joker = _mean_and_se([r.joker for r in results])
    seen_miss = [(~r.covered) & (~r.new) for r in results]

    metrics = ExperimentMetrics(
        method=method,
        coverage=coverage[0], coverage_se=coverage[1],
        avg_cardinality=size[0], cardinality_se=size[1],
        joker_rate=joker[0], joker_se=joker[1],
        allocations=[r.allocation for r in results],
    )
    metrics.extras["new_label_rate"] = _mean_and_se([r.new for r in results])
    metrics.extras["seen_miscoverage"] = _mean_and_se(seen_miss)
    if not method.startswith("standard"):
        metrics.extras["psi_unseen"] = _mean_and_se([r.psi_unseen for r in results])
        metrics.extras["psi_seen"] = _mean_and_se([r.psi_seen for r in results])

    covered = np.concatenate([r.covered for r in results])
    bins = np.concatenate([r.bins for r in results])
    for b, name in enumerate(BIN_NAMES):
        in_bin = covered[bins == b]
        metrics.stratified_counts[name] = int(in_bin.size)
        if in_bin.size:
            p = float(in_bin.mean())
            metrics.stratified_coverage[name] = p
            metrics.stratified_se[name] = math.sqrt(p * (1 - p) / in_bin.size)
    return metrics


def run_experiment(spec: ExperimentSpec) -> ExperimentMetrics:
    """
    Run spec.reps independent repetitions and aggregate their metrics.

    Args:
        spec: Validated experiment specification

    Returns:
        ExperimentMetrics with standard errors
    """
    logger.info(f"Running {spec.method} with theta={spec.theta}, n={spec.n}, {spec.reps} reps x {spec.tests} tests")
    if spec.workers > 1 and spec.reps > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as executor:
            results = list(executor.map(run_repetition, [spec] * spec.reps, range(spec.reps)))
    else:
        results = [run_repetition(spec, rep) for rep in range(spec.reps)]
    metrics = aggregate(spec.method, results)
    logger.info(f"{spec.method}: coverage {metrics.coverage:.3f} ± {1.96 * metrics.coverage_se:.3f}, "
                f"size {metrics.avg_cardinality:.2f}, joker {metrics.joker_rate:.3f}")
    return metrics
