"""
Utility functions for writing experiment outputs.
"""
import csv
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from config import BIN_NAMES

logger = logging.getLogger(__name__)

METRICS_HEADER = ["method", "grid", "theta", "n", "metric", "value", "se"]
PLOT_HEADER = ["method", "grid", "theta", "n", "coverage", "coverage_se", "size", "size_se", "joker", "joker_se"] + [
    f"coverage_{name}" for name in BIN_NAMES] + [f"coverage_{name}_se" for name in BIN_NAMES]
ALLOCATIONS_HEADER = ["method", "theta", "n", "rep", "alpha_class", "alpha_unseen", "alpha_seen"]


def format_value(value) -> str:
    """Stable text for CSV cells; floats use repr so repeated runs are byte-identical."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """
    Write rows to a CSV file, creating parent directories.

    Args:
        path: Output path
        header: Column names
        rows: Row values

    Returns:
        Path to the file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])
            count += 1
    logger.info(f"Saved {count} rows to {path}")
    return path


def metric_rows(method: str, grid: str, theta: Optional[float], n: int, metrics) -> List[list]:
    """Long-format rows (method, grid, theta, n, metric, value, se) of one experiment."""
    return [[method, grid, theta, n, metric, float(value), float(se)] for metric, value, se in metrics.rows()]


def plot_row(method: str, grid: str, theta: Optional[float], n: int, metrics) -> list:
    """One wide row per (method, grid value) with the plotted series."""
    row = [method, grid, theta, n, metrics.coverage, metrics.coverage_se, metrics.avg_cardinality,
           metrics.cardinality_se, metrics.joker_rate, metrics.joker_se]
    row += [metrics.stratified_coverage.get(name) for name in BIN_NAMES]
    row += [metrics.stratified_se.get(name) for name in BIN_NAMES]
    return row


def allocation_rows(method: str, theta: Optional[float], n: int, allocations) -> List[list]:
    return [[method, theta, n, rep, a.alpha_class, a.alpha_unseen, a.alpha_seen]
            for rep, a in enumerate(allocations) if a is not None]


def write_allocation_toml(allocation, path: Union[str, Path]) -> Path:
    """Write a tuned allocation as TOML keys alpha_class, alpha_unseen and alpha_seen."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        f"alpha_class = {allocation.alpha_class!r}\n"
        f"alpha_unseen = {allocation.alpha_unseen!r}\n"
        f"alpha_seen = {allocation.alpha_seen!r}\n",
        encoding="utf-8",
    )
    logger.info(f"Saved allocation to {path}")
    return path
