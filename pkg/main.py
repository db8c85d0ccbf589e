#!/usr/bin/env python3
"""
Generative MIL Toolkit - Command Line Interface
train / infer / eval / simulate / benchmark over bag datasets
"""

import io
import logging
import math
import os
import sys
from typing import List, Optional, Sequence

import click
from rich.console import Console
from rich.table import Table

from core.config import configure_logging, settings
from core.data.loaders import load_bag_csv, load_musk1, save_bag_csv
from core.data.serialization import (
    atomic_write_text,
    format_report,
    inference_csv,
    iteration_log_csv,
    load_model,
    save_model,
)
from core.data.synthetic_data_manager import SyntheticDataManager, load_generator_config
from core.errors import DimensionMismatchError, MilError
from core.evaluation import EvalReport, leave_one_bag_out, non_mil_baseline
from core.mil_engine import EmConfig, ModelKind, infer_bag, train
from core.models.bag import Dataset
from core.models.classifiers import ClassifierKind
from core.models.density import DensityKind

logger = logging.getLogger(__name__)

MUSK1_FILENAMES = ("clean1.data", "clean1.csv", "musk1.data")
SYNTHETIC_FILENAME = "synthetic.csv"
MUSK1_PCA_THRESHOLD = 0.90
TABLE_WIDTH = 120

seed_option = click.option(
    "--seed", type=click.IntRange(0, 2 ** 64 - 1), default=0, show_default=True, help="Random seed."
)


def model_options(command):
    """Flags selecting the model structure and its components"""
    options = [
        click.option("--model", "model_kind", type=click.Choice([k.value for k in ModelKind]),
                     default=settings.DEFAULT_MODEL, show_default=True),
        click.option("--density", "density_kind", type=click.Choice([k.value for k in DensityKind]),
                     default=settings.DEFAULT_DENSITY, show_default=True, help="P(F|I) density for BIF."),
        click.option("--classifier", "classifier_kind", type=click.Choice([k.value for k in ClassifierKind]),
                     default=settings.DEFAULT_CLASSIFIER, show_default=True, help="P(I|F) classifier for FIB."),
        click.option("--feature-density", "feature_density_kind", type=click.Choice([k.value for k in DensityKind]),
                     default=settings.FIB_FEATURE_DENSITY, show_default=True, help="P(F) density for FIB."),
        click.option("--max-iterations", type=click.IntRange(min=1), default=settings.MAX_EM_ITERATIONS,
                     show_default=True),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _em_config(model_kind, density_kind, classifier_kind, feature_density_kind, max_iterations) -> EmConfig:
    return EmConfig.build(
        model_kind=model_kind,
        density_kind=density_kind,
        classifier_kind=classifier_kind,
        feature_density_kind=feature_density_kind,
        max_iterations=max_iterations,
    )


def _load_dataset(path: str, data_format: str) -> Dataset:
    return load_musk1(path) if data_format == "musk1" else load_bag_csv(path)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        atomic_write_text(out, text)
        logger.info(f"Wrote {out}")
    else:
        click.echo(text, nl=False)


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    return value if value is not None and math.isfinite(value) else None


@click.group()
@click.option("--log-level", default=None, help="Override GENMIL_LOG_LEVEL.")
def cli(log_level: Optional[str]):
    """Generative multiple-instance learning with BIF and FIB models."""
    configure_logging(log_level)


@cli.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--format", "data_format", type=click.Choice(["csv", "musk1"]), default="csv", show_default=True)
@model_options
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Model file to write.")
@click.option("--iteration-log", type=click.Path(dir_okay=False), default=None,
              help="Iteration log CSV (default: <out>.iterations.csv).")
@seed_option
def train_command(data_path, data_format, model_kind, density_kind, classifier_kind, feature_density_kind,
                  max_iterations, out, iteration_log, seed):
    """Fit a model with hard EM and save it."""
    config = _em_config(model_kind, density_kind, classifier_kind, feature_density_kind, max_iterations)
    dataset = _load_dataset(data_path, data_format)
    result = train(dataset, config)

    metadata = {
        "config": config.model_dump(mode="json"),
        "iterations": result.iteration_count,
        "converged": result.converged,
        "final_loglik": _finite_or_none(result.final_loglik),
        "seed": seed,
    }
    save_model(result.params, out, metadata)
    atomic_write_text(iteration_log or f"{os.path.splitext(out)[0]}.iterations.csv", iteration_log_csv(result.events))


@cli.command("infer")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--format", "data_format", type=click.Choice(["csv", "musk1"]), default="csv", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV file (default: stdout).")
@seed_option
def infer_command(model_path, data_path, data_format, out, seed):
    """MAP bag and instance labels for every bag."""
    params, _ = load_model(model_path)
    dataset = _load_dataset(data_path, data_format)
    if dataset.p != params.p:
        raise DimensionMismatchError(f"model was trained with p={params.p}, data has p={dataset.p}")
    results = [(bag.bag_id, infer_bag(params, bag.instances)) for bag in dataset.bags]
    _emit(inference_csv(results, params.t), out)


@cli.command("eval")
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--format", "data_format", type=click.Choice(["csv", "musk1"]), default="csv", show_default=True)
@model_options
@click.option("--pca", "pca_threshold", type=click.FloatRange(0.0, 1.0, min_open=True), default=None,
              help="Retained-variance fraction for per-fold PCA.")
@click.option("--baseline", is_flag=True, help="Also run the non-MIL QDA majority-vote baseline.")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Parallel folds.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report file (default: stdout).")
@seed_option
def eval_command(data_path, data_format, model_kind, density_kind, classifier_kind, feature_density_kind,
                 max_iterations, pca_threshold, baseline, workers, out, seed):
    """Leave-one-bag-out evaluation."""
    config = _em_config(model_kind, density_kind, classifier_kind, feature_density_kind, max_iterations)
    dataset = _load_dataset(data_path, data_format)
    reports = [leave_one_bag_out(dataset, config, pca_threshold=pca_threshold, workers=workers)]
    if baseline:
        reports.append(non_mil_baseline(dataset, pca_threshold=pca_threshold, workers=workers))
    _emit("\n".join(format_report(r) for r in reports), out)


@cli.command("simulate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Generator config JSON (default: built-in 3-class generator).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None,
              help="Random seed (default: the config seed, else 0).")
def simulate_command(config_path, out, seed):
    """Sample a synthetic bag dataset from a BIF model."""
    config = load_generator_config(config_path) if config_path else None
    if seed is None:
        seed = 0 if config is None or config.seed is None else config.seed
    manager = SyntheticDataManager(config)
    save_bag_csv(manager.generate(seed), out)


def benchmark_rows(dataset: Dataset) -> List[dict]:
    """Model matrix: BIF over every density, FIB over every classifier, then the baseline"""
    rows = []
    for density in DensityKind:
        rows.append({"name": f"bif/{density.value}", "config": EmConfig.build(model_kind="bif", density_kind=density)})
    for classifier in ("lr", "knn", "svm", "qda", "dd"):
        row = {"name": f"fib/{classifier}"}
        if classifier == "svm":
            row["note"] = "not implemented"
        elif classifier == "dd" and dataset.t != 2:
            row["note"] = "requires t = 2"
        else:
            row["config"] = EmConfig.build(model_kind="fib", classifier_kind=classifier)
        rows.append(row)
    rows.append({"name": "non-mil/qda", "baseline": True})
    return rows


def run_benchmark(dataset: Dataset, pca_threshold: Optional[float], workers: Optional[int]) -> List[dict]:
    rows = benchmark_rows(dataset)
    for row in rows:
        if "note" in row:
            continue
        try:
            if row.get("baseline"):
                row["report"] = non_mil_baseline(dataset, pca_threshold=pca_threshold, workers=workers)
            else:
                row["report"] = leave_one_bag_out(dataset, row["config"], pca_threshold=pca_threshold, workers=workers)
        except MilError as e:
            logger.warning(f"{row['name']} failed: {e}")
            row["note"] = f"failed ({type(e).__name__})"
    return rows


def render_benchmark(title: str, dataset: Dataset, rows: Sequence[dict]) -> str:
    table = Table(title=title, show_lines=False)
    for column in ("model", "bag acc", "inst acc", "log-lik", "iters", "degenerate"):
        table.add_column(column, justify="left" if column == "model" else "right", no_wrap=True)
    table.add_column("note", no_wrap=True)

    def fmt(value, digits=3):
        if value is None:
            return "-"
        if isinstance(value, float) and math.isinf(value):
            return "-inf"
        return f"{value:.{digits}f}"

    table.add_row("chance", fmt(1.0 / dataset.t), "-", "-", "-", "-", "")
    for row in rows:
        report: Optional[EvalReport] = row.get("report")
        if report is None:
            table.add_row(row["name"], "-", "-", "-", "-", "-", row.get("note", ""))
            continue
        table.add_row(
            row["name"],
            fmt(report.bag_accuracy),
            fmt(report.instance_accuracy),
            fmt(report.train_loglik, 1),
            "-" if report.iteration_count is None else str(report.iteration_count),
            str(report.degenerate_folds),
            "",
        )

    buffer = io.StringIO()
    console = Console(file=buffer, width=TABLE_WIDTH, color_system=None, force_terminal=False)
    console.print(table)
    return buffer.getvalue()


def _benchmark_dataset(suite: str, data_dir: Optional[str], seed: int) -> Dataset:
    if suite == "musk1":
        if not data_dir:
            raise click.UsageError("--data-dir is required for the musk1 suite")
        for name in MUSK1_FILENAMES:
            path = os.path.join(data_dir, name)
            if os.path.exists(path):
                return load_musk1(path)
        raise click.UsageError(f"no MUSK1 file ({', '.join(MUSK1_FILENAMES)}) in {data_dir}")

    cached = os.path.join(data_dir, SYNTHETIC_FILENAME) if data_dir else None
    if cached and os.path.exists(cached):
        logger.warning(f"Reusing {cached}; --seed {seed} is ignored (delete the file to regenerate)")
        return load_bag_csv(cached)
    dataset = SyntheticDataManager().generate(seed)
    if cached:
        save_bag_csv(dataset, cached)
        logger.info(f"Saved the seed {seed} synthetic dataset to {cached}")
    return dataset


@cli.command("benchmark")
@click.option("--suite", type=click.Choice(["musk1", "synthetic"]), required=True)
@click.option("--data-dir", type=click.Path(file_okay=False), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Parallel folds.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Table file (default: stdout).")
@seed_option
def benchmark_command(suite, data_dir, workers, out, seed):
    """Run the full model matrix under leave-one-bag-out."""
    dataset = _benchmark_dataset(suite, data_dir, seed)
    pca_threshold = MUSK1_PCA_THRESHOLD if suite == "musk1" else None
    rows = run_benchmark(dataset, pca_threshold, workers)
    title = f"{suite}: {dataset.n} bags, {dataset.instance_count} instances, t={dataset.t}"
    _emit(render_benchmark(title, dataset, rows), out)


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures to exit codes: 1 for operational errors, 2 for usage errors"""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="genmil", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except MilError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(cli_main())
