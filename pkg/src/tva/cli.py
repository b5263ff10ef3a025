"""Command line interface.

Five verbs: ``run`` executes the full pipeline on a dataset, ``sweep``
traces the LASSO path with downstream estimates per penalty,
``bootstrap`` reruns the pipeline on resampled data, ``simulate`` runs
the Monte Carlo study, and ``diagnose`` prints the design-level
irrepresentability and minimum-singular-value table.

Exit codes: 0 on success, 2 for input and schema problems, 3 for
numerical failures.  Errors print a single message to stderr; stack
traces are reserved for genuine bugs.
"""

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import pipeline as pl
from . import simharness as sh
from .errors import SchemaError, TVAError
from .lattice import FactorialDesign, relation_matrix
from .precondition import (
    irrepresentability_l1,
    limiting_gram,
    min_singular_closed_form,
)

__all__ = ["main"]


def _handle(fn):
    @functools.wraps(fn)
    def inner(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TVAError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return inner


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(out_dir):
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
def main():
    """Treatment variant aggregation for cross-randomized experiments."""


_config_opt = click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="JSON run configuration (schema plus selector settings).",
)
_data_opt = click.option(
    "--data", "data_path", required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="CSV dataset matching the configured schema.",
)
_out_opt = click.option(
    "--out-dir", default=".", show_default=True,
    type=click.Path(file_okay=False),
    help="Directory for output artifacts.",
)
_format_opt = click.option(
    "--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
    show_default=True, help="Primary output format.",
)


@main.command()
@_config_opt
@_data_opt
@_out_opt
@_format_opt
@_handle
def run(config_path, data_path, out_dir, fmt):
    """Select, pool, estimate and adjust on one dataset."""
    config = pl.PipelineConfig.from_file(config_path)
    dataset = pl.ingest(data_path, config.schema)
    report = pl.run_pipeline(dataset, config)
    out = _out_dir(out_dir)
    if fmt == "json":
        (out / "report.json").write_text(report.to_json() + "\n")
        target = out / "report.json"
    else:
        target = out / "report.csv"
        rows = report.estimate_rows()
        with open(target, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["pool", "label", "eta", "se", "count", "is_best"]
            )
            writer.writeheader()
            writer.writerows(rows)
    best = report.best_policy
    if best.get("no_effective_policy"):
        click.echo("no policy distinguishable from control")
    else:
        lo, hi = best["ci"]
        click.echo(
            f"best pooled policy: {best['label']} "
            f"(deploy {best['recommended_policy']}); "
            f"adjusted effect {best['adjusted']:.4g} "
            f"[{lo:.4g}, {hi:.4g}]"
        )
    click.echo(f"wrote {target}")


@main.command()
@_config_opt
@_data_opt
@_out_opt
@_format_opt
@_handle
def sweep(config_path, data_path, out_dir, fmt):
    """Trace the LASSO path; needs 'lambda_grid' in the config."""
    config = pl.PipelineConfig.from_file(config_path)
    dataset = pl.ingest(data_path, config.schema)
    entries = pl.sweep_pipeline(dataset, config)
    rows = pl.sweep_rows(dataset, entries)
    out = _out_dir(out_dir)
    if fmt == "json":
        target = out / "sweep.json"
        _write_json(target, rows)
    else:
        target = out / "sweep.csv"
        with open(target, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["lambda", "support_size", "support",
                                "best_policy", "second_best", "naive",
                                "adjusted", "ci", "error"],
            )
            writer.writeheader()
            for row in rows:
                flat = dict(row)
                flat["support"] = "" if row["support"] is None else " ".join(
                    str(j) for j in row["support"]
                )
                flat["ci"] = "" if row["ci"] is None else " ".join(
                    f"{v:.10g}" for v in row["ci"]
                )
                writer.writerow(flat)
    click.echo(f"wrote {target} ({len(rows)} penalties)")


@main.command()
@_config_opt
@_data_opt
@_out_opt
@click.option("--seed", default=0, show_default=True, type=int,
              help="Base seed for the resampling streams.")
@_handle
def bootstrap(config_path, data_path, out_dir, seed):
    """Bootstrap the pipeline and report selection stability."""
    config = pl.PipelineConfig.from_file(config_path)
    dataset = pl.ingest(data_path, config.schema)
    report = sh.bootstrap_stability(
        dataset, config, B=config.bootstrap_replicates,
        stratify_by_policy=config.bootstrap_stratify, seed=seed,
    )
    out = _out_dir(out_dir)
    target = out / "stability.json"
    _write_json(target, report.to_json_dict())
    click.echo(
        f"support stability {report.support_stability:.3f} over "
        f"{report.replicates} replicates; wrote {target}"
    )


def _simulation_config(path, seed):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from exc
    allowed = {
        "design", "sigma", "support_size", "coefficient_rule",
        "coefficient_range", "n_grid", "replications", "configurations",
        "seed", "selector", "p_threshold", "lasso_penalty", "alpha", "beta",
        "reference_n",
    }
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise SchemaError(f"unknown simulation config keys {unknown}")
    kwargs = dict(raw)
    if "design" in kwargs:
        kwargs["design"] = FactorialDesign(tuple(kwargs["design"]))
    for key in ("n_grid", "coefficient_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if seed is not None:
        kwargs["seed"] = seed
    try:
        return sh.SimulationConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad simulation config: {exc}") from exc


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON simulation configuration.")
@_out_opt
@click.option("--seed", default=None, type=int,
              help="Override the configured seed.")
@_format_opt
@_handle
def simulate(config_path, out_dir, seed, fmt):
    """Run the Monte Carlo study and write metric summaries."""
    config = _simulation_config(config_path, seed)
    report = sh.run_study(config)
    out = _out_dir(out_dir)
    if fmt == "json":
        target = out / "study.json"
        _write_json(target, report.to_json_dict())
    else:
        target = out / "study.csv"
        report.write_csv(target)
    click.echo(f"wrote {target} ({len(report.rows)} metric rows)")


@main.command()
@_out_opt
@click.option("--max-dosage", default=5, show_default=True, type=int,
              help="Largest per-arm dosage count R in the table.")
@click.option("--max-arms", default=3, show_default=True, type=int,
              help="Largest arm count M in the table.")
@_handle
def diagnose(out_dir, max_dosage, max_arms):
    """Tabulate irrepresentability and minimum singular values.

    For each uniform design (R arms levels, M arms) the table shows the
    worst-case L1 irrepresentability statistic of the population
    marginal design (values above 1 mean the plain LASSO's consistency
    condition fails, the motivation for preconditioning) and the
    minimum singular value of the limiting design against its closed
    form.
    """
    rows = []
    for r in range(3, max_dosage + 1):
        for m in range(2, max_arms + 1):
            design = FactorialDesign((r,) * m)
            w = relation_matrix(design, intercept=True)
            worst = max(
                irrepresentability_l1(w, j, standardized=True)
                for j in range(1, design.n_policies)
            )
            gram = limiting_gram(design)
            numeric = float(np.sqrt(np.linalg.eigvalsh(gram).min()))
            closed = min_singular_closed_form(r, m)
            rows.append({
                "R": r, "M": m, "policies": design.n_policies,
                "max_irrepresentability_l1": worst,
                "min_singular_numeric": numeric,
                "min_singular_closed_form": closed,
                "abs_difference": abs(numeric - closed),
            })
    out = _out_dir(out_dir)
    target = out / "diagnostics.csv"
    with open(target, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    click.echo(f"{'R':>3} {'M':>3} {'K':>6} {'irrep L1':>10} "
               f"{'min sv':>12} {'closed form':>12}")
    for row in rows:
        click.echo(
            f"{row['R']:>3} {row['M']:>3} {row['policies']:>6} "
            f"{row['max_irrepresentability_l1']:>10.4f} "
            f"{row['min_singular_numeric']:>12.6g} "
            f"{row['min_singular_closed_form']:>12.6g}"
        )
    click.echo(f"wrote {target}")


if __name__ == "__main__":
    main()
