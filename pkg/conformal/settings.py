"""
Validated run configuration.

Every command reads an optional flat TOML file, overlays command-line flags and
validates the result with pydantic before any computation starts.
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from config import (
    BIN_EDGES,
    CAL_FRACTION,
    DEFAULT_ALPHA,
    DEFAULT_N,
    DEFAULT_REPS,
    DEFAULT_SEED,
    DEFAULT_TESTS,
    DP_DIM,
    DP_SIGMA2,
    KNN_METRIC,
    KNN_NEIGHBORS,
    LOF_NEIGHBORS,
    OUTPUT_DIR,
    POWER_LAW_BETA,
    SMOOTHING_NOISE,
    TUNING_FOLDS,
    TUNING_LAMBDA,
    WORKERS,
)

logger = logging.getLogger(__name__)

Method = Literal["standard-random", "standard-selective", "cgtc-random", "cgtc-selective"]
PValueVariant = Literal["GT", "RGT", "XGT"]
METHODS: Tuple[str, ...] = ("standard-random", "standard-selective", "cgtc-random", "cgtc-selective")


class ConfigError(ValueError):
    """Raised when a configuration file cannot be read or contains unknown keys."""


class ExperimentOptions(BaseModel):
    """Options shared by every command."""
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(DEFAULT_ALPHA, gt=0, lt=1)
    pvalue: PValueVariant = "XGT"
    seen_pvalue: PValueVariant = "RGT"
    allocation: Literal["fixed", "tuned"] = "fixed"
    alpha_class: Optional[float] = Field(None, ge=0, le=1)
    alpha_unseen: Optional[float] = Field(None, ge=0, le=1)
    alpha_seen: Optional[float] = Field(None, ge=0, le=1)
    tuning_lambda: float = Field(TUNING_LAMBDA, ge=0, le=1)
    folds: int = Field(TUNING_FOLDS, ge=2)
    knn_neighbors: int = Field(KNN_NEIGHBORS, ge=1)
    metric: Literal["euclidean", "cosine"] = KNN_METRIC
    lof_neighbors: int = Field(LOF_NEIGHBORS, ge=1)
    beta: float = Field(POWER_LAW_BETA, gt=0)
    cal_fraction: float = Field(CAL_FRACTION, gt=0, lt=1)
    randomized_aps: bool = True
    smoothing_noise: float = Field(SMOOTHING_NOISE, ge=0)
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def check_fixed_allocation(self):
        given = [self.alpha_class, self.alpha_unseen, self.alpha_seen]
        if any(value is not None for value in given):
            if any(value is None for value in given):
                raise ValueError("alpha_class, alpha_unseen and alpha_seen must be given together")
            if not math.isclose(sum(given), self.alpha, rel_tol=0, abs_tol=1e-9):
                raise ValueError(f"alpha_class + alpha_unseen + alpha_seen must equal alpha={self.alpha}")
        return self

    def fixed_split(self) -> Tuple[float, float]:
        """(alpha_class, alpha_seen) of the fixed allocation, alpha/3 each by default."""
        if self.alpha_class is None:
            return self.alpha / 3, self.alpha / 3
        return self.alpha_class, self.alpha_seen


class DataOptions(BaseModel):
    """Where reference and test data come from: a Dirichlet-process simulation or a CSV."""
    model_config = ConfigDict(extra="forbid")

    theta: Optional[float] = Field(None, ge=0)
    n: int = Field(DEFAULT_N, ge=2)
    dim: int = Field(DP_DIM, ge=1)
    sigma2: float = Field(DP_SIGMA2, gt=0)
    base: Literal["uniform", "normal"] = "uniform"
    data: Optional[Path] = None
    reps: int = Field(DEFAULT_REPS, ge=1)
    tests: int = Field(DEFAULT_TESTS, ge=1)
    bin_edges: Tuple[int, int, int] = BIN_EDGES
    workers: int = Field(WORKERS, ge=1)

    @field_validator("bin_edges")
    @classmethod
    def check_bin_edges(cls, edges):
        if not 2 <= edges[0] < edges[1] < edges[2]:
            raise ValueError("bin edges must be increasing and start at 2 or above")
        return edges


class ExperimentSpec(ExperimentOptions, DataOptions):
    """Input of a single experiment: one method on one data configuration."""
    method: Method = "cgtc-random"

    @model_validator(mode="after")
    def check_data_source(self):
        if self.theta is None and self.data is None:
            raise ValueError("either theta (simulated data) or data (CSV path) is required")
        return self


class RunConfig(ExperimentOptions, DataOptions):
    """The `run` command: methods compared over a grid of theta and n values."""
    methods: List[Method] = Field(default_factory=lambda: list(METHODS), min_length=1)
    thetas: List[float] = Field(default_factory=list)
    ns: List[int] = Field(default_factory=list)
    out: Path = OUTPUT_DIR / "metrics.csv"
    plot_out: Optional[Path] = None
    allocations_out: Optional[Path] = None
    report: Optional[Path] = None

    @model_validator(mode="after")
    def check_grid(self):
        if self.data is None and self.theta is None and not self.thetas:
            raise ValueError("theta is required unless data is given")
        if any(theta < 0 for theta in self.thetas):
            raise ValueError("thetas must be nonnegative")
        if any(n < 2 for n in self.ns):
            raise ValueError("ns must be at least 2")
        return self

    def grid_name(self) -> str:
        if len(self.ns) > 1 and len(self.thetas) <= 1:
            return "n"
        return "theta"

    def specs(self) -> Iterator[ExperimentSpec]:
        """One ExperimentSpec per (method, theta, n) combination."""
        thetas = self.thetas or [self.theta]
        ns = self.ns or [self.n]
        shared = self.model_dump(exclude={"methods", "thetas", "ns", "out", "plot_out", "allocations_out",
                                          "report", "theta", "n"})
        for method in self.methods:
            for theta in thetas:
                for n in ns:
                    yield ExperimentSpec(method=method, theta=theta, n=n, **shared)


class SimulateConfig(BaseModel):
    """The `simulate` command."""
    model_config = ConfigDict(extra="forbid")

    theta: float = Field(..., ge=0)
    n: int = Field(DEFAULT_N, ge=0)
    dim: int = Field(DP_DIM, ge=1)
    sigma2: float = Field(DP_SIGMA2, gt=0)
    base: Literal["uniform", "normal"] = "uniform"
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2 ** 64)
    tests: int = Field(0, ge=0)
    out: Path = OUTPUT_DIR / "data.csv"
    test_out: Optional[Path] = None


class TuneConfig(ExperimentOptions):
    """The `tune` command."""
    data: Path
    split: Literal["random", "selective"] = "random"
    out: Optional[Path] = None


class PredictConfig(ExperimentOptions):
    """The `predict` command."""
    reference: Path
    queries: Optional[Path] = None
    query: List[str] = Field(default_factory=list)
    split: Literal["random", "selective"] = "random"
    out: Optional[Path] = None

    @model_validator(mode="after")
    def check_queries(self):
        if self.queries is None and not self.query:
            raise ValueError("give queries (a CSV path) or at least one query")
        return self


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a flat TOML configuration file.

    Raises:
        ConfigError: If the file cannot be read or is not valid TOML
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            values = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid config file {path}: {e}") from e
    nested = [key for key, value in values.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"config file {path} must be flat, found tables: {', '.join(nested)}")
    logger.info(f"Loaded {len(values)} settings from {path}")
    return values


def merge_settings(file_values: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """File values overlaid with command-line values that were actually given."""
    merged = dict(file_values)
    for key, value in overrides.items():
        if value is None or value == () or value == []:
            continue
        merged[key] = list(value) if isinstance(value, tuple) else value
    return merged


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (int, str)):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(item) for item in value) + "]"
    return json.dumps(str(value))


def write_config_file(config: BaseModel, path: Union[str, Path]) -> Path:
    """Write the effective configuration as flat TOML that re-runs to the same result."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = config.model_dump(mode="json", exclude_none=True)
    lines = [f"{key} = {_toml_value(value)}" for key, value in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Saved effective configuration to {path}")
    return path
