#!/usr/bin/env python3
"""
gt-conformal - command-line entry point.

Open-set conformal classification with Good-Turing p-values: simulate Dirichlet-process
data, compare methods over repeated experiments, tune the significance budget and
predict joker-augmented sets for new queries.
"""
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Optional, Type

import click
import numpy as np
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table

from config import LOG_LEVEL
from conformal.data_core import (
    RandomSource,
    frequency_profile,
    load_dataset_csv,
    load_features_csv,
    parse_feature_row,
    save_dataset_csv,
)
from conformal.logger import RunLogger
from conformal.open_set import TuningConfig, tune_allocation
from conformal.settings import (
    ConfigError,
    PredictConfig,
    RunConfig,
    SimulateConfig,
    TuneConfig,
    load_config_file,
    merge_settings,
    write_config_file,
)
from conformal.simulation import DirichletProcessSimulator, DpConfig, allocation_for, make_classifier, run_experiment
from conformal.utils import (
    ALLOCATIONS_HEADER,
    METRICS_HEADER,
    PLOT_HEADER,
    allocation_rows,
    metric_rows,
    plot_row,
    write_allocation_toml,
    write_csv,
)

logger = logging.getLogger(__name__)

# Primary output goes to stdout, diagnostics to stderr
console = Console()
err_console = Console(stderr=True)


def configure_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    """Configure handlers once for the whole process."""
    handlers = [RichHandler(console=err_console, show_path=False)]
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        handlers.append(file_handler)
    logging.basicConfig(
        level=logging.INFO if verbose else LOG_LEVEL,
        format="%(message)s",
        handlers=handlers,
        force=True,
    )


class ExitCodeGroup(click.Group):
    """Click group that reports usage errors with exit code 1."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise


@contextmanager
def cli_errors():
    """Map configuration errors to exit code 1 and runtime errors to exit code 2."""
    try:
        yield
    except (ValidationError, ConfigError) as e:
        err_console.print(f"[bold red]Configuration error:[/bold red] {escape(str(e))}")
        sys.exit(1)
    except (ValueError, OSError) as e:
        err_console.print(f"[bold red]Error:[/bold red] {escape(str(e))}")
        sys.exit(2)


def load_settings(model: Type[BaseModel], config_path: Optional[str], overrides: Dict[str, Any]) -> BaseModel:
    """Validate file values overlaid with command-line flags."""
    file_values = load_config_file(config_path) if config_path else {}
    return model.model_validate(merge_settings(file_values, overrides))


def allocation_options(func):
    """Options shared by commands that build joker-augmented sets."""
    options = [
        click.option("--alpha", type=float, help="Total significance budget"),
        click.option("--pvalue", help="p-value for the unseen-label test: GT, RGT or XGT"),
        click.option("--seen-pvalue", help="p-value inside the seen-label test: GT, RGT or XGT"),
        click.option("--alloc", "allocation", help="Budget allocation: fixed or tuned"),
        click.option("--alpha-class", type=float, help="Fixed budget of the closed-set test"),
        click.option("--alpha-unseen", type=float, help="Fixed budget of the unseen-label test"),
        click.option("--alpha-seen", type=float, help="Fixed budget of the seen-label test"),
        click.option("--seed", type=int, help="Random seed"),
        click.option("--config", "config_path", type=click.Path(), help="Flat TOML configuration file"),
        click.option("--save-config", type=click.Path(), help="Write the effective configuration here"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group(cls=ExitCodeGroup)
@click.option("--verbose", "-v", is_flag=True, help="Log progress at INFO level")
@click.option("--log-file", type=click.Path(), help="Also write logs to this file")
def main(verbose, log_file):
    """Open-set conformal classification with Good-Turing p-values."""
    configure_logging(verbose, log_file)


@main.command()
@click.option("--theta", type=float, help="Dirichlet-process concentration")
@click.option("--n", type=int, help="Number of reference samples")
@click.option("--dim", type=int, help="Feature dimension")
@click.option("--sigma2", type=float, help="Feature noise variance")
@click.option("--base", help="Base distribution: uniform or normal")
@click.option("--tests", type=int, help="Also draw this many test points")
@click.option("--seed", type=int, help="Random seed")
@click.option("--out", type=click.Path(), help="Dataset CSV path")
@click.option("--test-out", type=click.Path(), help="Test CSV path")
@click.option("--config", "config_path", type=click.Path(), help="Flat TOML configuration file")
@click.option("--save-config", type=click.Path(), help="Write the effective configuration here")
def simulate(config_path, save_config, **flags):
    """Draw a Dirichlet-process dataset and write it as CSV."""
    with cli_errors():
        cfg = load_settings(SimulateConfig, config_path, flags)
        if save_config:
            write_config_file(cfg, save_config)

        source = RandomSource(cfg.seed)
        dp = DpConfig(theta=cfg.theta, n=cfg.n, dim=cfg.dim, sigma2=cfg.sigma2, base=cfg.base)
        simulator = DirichletProcessSimulator(dp, source.stream("dp").generator())
        dataset = simulator.sample()
        save_dataset_csv(dataset, cfg.out)

        profile = frequency_profile(dataset.labels)
        console.print(f"Wrote [bold]{dataset.n}[/bold] samples with [bold]{profile.distinct}[/bold] labels "
                      f"({profile.M(1)} singletons) to {cfg.out}")

        if cfg.tests:
            simulator.rng = source.stream("test").generator()
            test = simulator.predictive(cfg.tests)
            test_out = cfg.test_out or cfg.out.with_name(f"{cfg.out.stem}_test{cfg.out.suffix}")
            save_dataset_csv(test, test_out)
            console.print(f"Wrote [bold]{test.n}[/bold] test points to {test_out}")


@main.command()
@click.option("--method", "methods", multiple=True, help="Method to compare (repeatable)")
@click.option("--theta", "thetas", type=float, multiple=True, help="Concentration value (repeatable)")
@click.option("--n", "ns", type=int, multiple=True, help="Reference sample size (repeatable)")
@click.option("--data", type=click.Path(), help="Dataset CSV used instead of simulated data")
@click.option("--reps", type=int, help="Independent repetitions")
@click.option("--tests", type=int, help="Test points per repetition")
@click.option("--workers", type=int, help="Parallel worker processes")
@click.option("--out", type=click.Path(), help="Metrics CSV path")
@click.option("--plot-out", type=click.Path(), help="Plot-ready CSV path")
@click.option("--allocations-out", type=click.Path(), help="Per-repetition allocations CSV path")
@click.option("--report", type=click.Path(), help="Markdown run report path")
@allocation_options
def run(config_path, save_config, **flags):
    """Run repeated experiments and write metrics with standard errors."""
    with cli_errors():
        cfg = load_settings(RunConfig, config_path, flags)
        if save_config:
            write_config_file(cfg, save_config)

        grid = cfg.grid_name()
        report = RunLogger("gt-conformal")
        report.start_section("Configuration")
        report.log_config(cfg.model_dump(mode="json", exclude_none=True))
        report.start_section("Results")

        table = Table(title="Experiment summary")
        for column in ("method", "theta", "n", "coverage", "size", "joker"):
            table.add_column(column, justify="left" if column == "method" else "right")

        metrics_out, plot_out, allocations_out = [], [], []
        for spec in cfg.specs():
            metrics = run_experiment(spec)
            metrics_out += metric_rows(spec.method, grid, spec.theta, spec.n, metrics)
            plot_out.append(plot_row(spec.method, grid, spec.theta, spec.n, metrics))
            allocations_out += allocation_rows(spec.method, spec.theta, spec.n, metrics.allocations)
            table.add_row(
                spec.method,
                "" if spec.theta is None else f"{spec.theta:g}",
                str(spec.n),
                f"{metrics.coverage:.3f} ± {1.96 * metrics.coverage_se:.3f}",
                f"{metrics.avg_cardinality:.2f} ± {1.96 * metrics.cardinality_se:.2f}",
                f"{metrics.joker_rate:.3f} ± {1.96 * metrics.joker_se:.3f}",
            )
            title = f"{spec.method}, theta={spec.theta}, n={spec.n}"
            report.start_subsection(title)
            report.log_text(f"{spec.reps} repetitions of {spec.tests} test points, "
                            f"{sum(r is not None for r in metrics.allocations) or 'no'} tuned allocations.")
            report.log_metrics(title, metrics.rows())
            report.log_allocations(f"{title}: tuned allocations", metrics.allocations)

        write_csv(cfg.out, METRICS_HEADER, metrics_out)
        if cfg.plot_out:
            write_csv(cfg.plot_out, PLOT_HEADER, plot_out)
        if cfg.allocations_out or (cfg.allocation == "tuned" and allocations_out):
            path = cfg.allocations_out or cfg.out.with_name(f"{cfg.out.stem}_allocations{cfg.out.suffix}")
            write_csv(path, ALLOCATIONS_HEADER, allocations_out)
        if cfg.report:
            report.save(cfg.report)

        console.print(table)
        console.print(f"Metrics written to {cfg.out}")


@main.command()
@click.option("--data", type=click.Path(), help="Reference dataset CSV")
@click.option("--lambda", "tuning_lambda", type=float, help="Weight of the set-size term in the loss")
@click.option("--folds", type=int, help="Cross-validation folds")
@click.option("--split", help="Inner split: random or selective")
@click.option("--out", type=click.Path(), help="Write the allocation as TOML")
@allocation_options
def tune(config_path, save_config, **flags):
    """Select (alpha_class, alpha_unseen, alpha_seen) by cross-validation."""
    with cli_errors():
        cfg = load_settings(TuneConfig, config_path, flags)
        if save_config:
            write_config_file(cfg, save_config)

        dataset = load_dataset_csv(cfg.data)
        tuning = TuningConfig(lambda_=cfg.tuning_lambda, folds=cfg.folds)
        allocation = tune_allocation(dataset, cfg.alpha, tuning, RandomSource(cfg.seed).stream("tune"),
                                     make_classifier(cfg, cfg.split))

        console.print(Panel(
            f"alpha_class = {allocation.alpha_class!r}\n"
            f"alpha_unseen = {allocation.alpha_unseen!r}\n"
            f"alpha_seen = {allocation.alpha_seen!r}",
            title=f"Tuned allocation (alpha = {cfg.alpha})",
        ))
        if cfg.out:
            write_allocation_toml(allocation, cfg.out)


@main.command()
@click.option("--reference", type=click.Path(), help="Reference dataset CSV")
@click.option("--query", multiple=True, help="Comma-separated query features (repeatable)")
@click.option("--queries", type=click.Path(), help="CSV of query features")
@click.option("--split", help="Split strategy: random or selective")
@click.option("--out", type=click.Path(), help="Also write the prediction lines here")
@allocation_options
def predict(config_path, save_config, **flags):
    """Print one joker-augmented prediction set per query."""
    with cli_errors():
        cfg = load_settings(PredictConfig, config_path, flags)
        if save_config:
            write_config_file(cfg, save_config)

        reference = load_dataset_csv(cfg.reference)
        if cfg.queries:
            queries = load_features_csv(cfg.queries, reference.dim)
        else:
            queries = np.vstack([parse_feature_row(text, row, reference.dim)
                                 for row, text in enumerate(cfg.query, start=1)])

        source = RandomSource(cfg.seed)
        estimator = make_classifier(cfg, cfg.split)
        classifier = estimator.clone().fit(reference, source.stream("fit"))
        allocation = allocation_for(cfg, reference, source, estimator)
        pvalues = classifier.pvalues(queries, source.stream("predict"))

        lines = []
        for prediction, psi_unseen, psi_seen in zip(pvalues.predict(allocation), pvalues.psi_unseen, pvalues.psi_seen):
            tokens = prediction.render(reference.label_names)
            tokens += [f"psi_unseen={float(psi_unseen)!r}", f"psi_seen={float(psi_seen)!r}"]
            lines.append(" ".join(tokens))
        for line in lines:
            click.echo(line)
        if cfg.out:
            out = Path(cfg.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
