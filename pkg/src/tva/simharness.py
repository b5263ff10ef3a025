"""Monte Carlo harness: data generation, performance metrics, comparators.

The benchmark design has three arms with dosage counts (5, 5, 3), noise
standard deviation 2.3, and a random size-3 marginal support with
coefficients linearly spaced on [1, 5].  Per replication the harness
draws uniform cell assignments, simulates outcomes, runs the full
pipeline (select, pool, estimate, adjust), and scores it against the
known truth on four metrics: support accuracy (Jaccard), inclusion of
some or of the minimum-dosage member of the true best pool in the
estimated best pool, and squared error of the adjusted best-policy
estimate.  A direct per-cell OLS comparator (singleton pools, pure
conditional winner's-curse adjustment) runs alongside.

Relaxed-sparsity regimes R1 to R5 add secondary coefficient blocks that
shrink with n at rates 1/n, 1/sqrt(n) or 1/n^0.2; rates anchor at a
reference sample size so that coefficient magnitudes are interpretable
at every n, and the true best pool is recomputed from the realized
coefficients at each n.

Everything runs on per-cell sufficient statistics; unit-level design
matrices never materialize.  Replications seed independently from the
tuple (seed, configuration, replication), so serial and parallel runs
agree bitwise; runs at different n reuse a replication's stream, which
acts as common random numbers across the grid.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import TVAError
from .estimation import best_policy, fit_from_cell_stats
from .lattice import FactorialDesign, enumerate_policies, relation_matrix
from .pooling import PooledPartition, format_policy, pool
from .selection import backward_eliminate_moments, lasso_from_moments
from .winners_curse import (
    conditional_median_estimate,
    hybrid,
    truncation_bounds,
)

__all__ = [
    "SimulationConfig",
    "SimulatedDraw",
    "CellData",
    "StudyReport",
    "StabilityReport",
    "generate",
    "draw_configuration",
    "support_accuracy",
    "best_inclusion",
    "best_policy_mse",
    "run_study",
    "bootstrap_stability",
]

REGIMES = ("R1", "R2", "R3", "R4", "R5")


@dataclass(frozen=True)
class SimulationConfig:
    """Configuration of one Monte Carlo study.

    The defaults reproduce the benchmark: design (5, 5, 3), sigma 2.3,
    three support coordinates with coefficients linspace(1, 5), twenty
    replications over five random configurations, n from 1,000 to
    10,000.  ``coefficient_rule`` is ``"linspace"`` or a regime id
    ``"R1"`` to ``"R5"``; regimes use ``2M``, ``2M``, ``3M``, ``M``,
    ``2M`` support coordinates for ``M`` arms and anchor their shrink
    rates at ``reference_n``.
    """

    design: FactorialDesign = FactorialDesign((5, 5, 3))
    sigma: float = 2.3
    support_size: int = 3
    coefficient_rule: str = "linspace"
    coefficient_range: tuple = (1.0, 5.0)
    n_grid: tuple = (1000, 10000)
    replications: int = 20
    configurations: int = 5
    seed: int = 0
    selector: str = "backward"
    p_threshold: float = 1e-4
    lasso_penalty: float = 1.0
    alpha: float = 0.05
    beta: float = 0.005
    reference_n: float = 1000.0

    def __post_init__(self):
        if not isinstance(self.design, FactorialDesign):
            object.__setattr__(
                self, "design", FactorialDesign(tuple(self.design))
            )
        if self.coefficient_rule not in ("linspace",) + REGIMES:
            raise ValueError(
                f"unknown coefficient rule {self.coefficient_rule!r}"
            )
        if self.selector not in ("backward", "lasso"):
            raise ValueError(f"unknown selector {self.selector!r}")

    def to_dict(self):
        d = asdict(self)
        d["design"] = list(self.design.dosages)
        return d


@dataclass(frozen=True)
class TrueConfiguration:
    """A drawn support plus its (possibly n-dependent) coefficient law."""

    support: tuple
    rule: str
    size: int
    coefficient_range: tuple
    reference_n: float

    def coefficients(self, n):
        lo, hi = self.coefficient_range
        m = self.size
        if self.rule == "linspace":
            return np.linspace(lo, hi, m)
        f = self.reference_n / n
        if self.rule == "R1":
            return np.concatenate([np.linspace(1, 5, m), np.linspace(1, 5, m) * f])
        if self.rule == "R2":
            return np.concatenate(
                [np.linspace(1, 5, m), np.linspace(1, 5, m) * f**0.5]
            )
        if self.rule == "R3":
            return np.concatenate(
                [np.linspace(5, 10, m), np.linspace(1, 2, m),
                 np.linspace(1, 5, m) * f]
            )
        if self.rule == "R4":
            return np.linspace(1, 5, m) * f**0.2
        if self.rule == "R5":
            return np.concatenate(
                [np.linspace(1, 5, m) * f**0.2, np.linspace(1, 5, m) * f**0.5]
            )
        raise ValueError(f"unknown coefficient rule {self.rule!r}")


@dataclass(frozen=True)
class CellData:
    """Per-cell sufficient statistics of one simulated sample."""

    counts: np.ndarray
    sums: np.ndarray
    sumsq: np.ndarray

    @property
    def n(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class SimulatedDraw:
    """One materialized replication: unit data plus the generating truth."""

    assignments: np.ndarray
    y: np.ndarray
    true_alpha: np.ndarray
    true_partition: PooledPartition


@lru_cache(maxsize=32)
def _relation_with_intercept(dosages):
    return relation_matrix(FactorialDesign(dosages), intercept=True)


def draw_configuration(config, config_id):
    """Draw one true configuration from the stream (seed, config_id).

    Regimes size the support from the arm count; the plain rule uses
    ``config.support_size``.  The intercept is never sampled.
    """
    rule = config.coefficient_rule
    m = config.design.arm_count if rule in REGIMES else config.support_size
    size = {"R1": 2 * m, "R2": 2 * m, "R3": 3 * m, "R4": m, "R5": 2 * m}.get(
        rule, m
    )
    rng = np.random.default_rng([config.seed, config_id])
    k = config.design.n_policies
    if size > k - 1:
        raise ValueError(f"support size {size} exceeds {k - 1} policies")
    support = rng.choice(np.arange(1, k), size=size, replace=False)
    return TrueConfiguration(
        support=tuple(int(j) for j in support),
        rule=rule,
        size=m if rule in REGIMES else size,
        coefficient_range=tuple(config.coefficient_range),
        reference_n=config.reference_n,
    )


def _true_alpha(config, truth, n):
    alpha = np.zeros(config.design.n_policies)
    alpha[list(truth.support)] = truth.coefficients(n)
    return alpha


def _true_pools(design, support, alpha):
    """True partition and per-pool effects implied by a support pattern."""
    partition = pool(design, support)
    etas = np.array([
        math.fsum(alpha[j] for j in sorted(sig)) for sig in partition.signatures
    ])
    return partition, etas


def _simulate_cells(design, alpha, n, sigma, rng):
    w = _relation_with_intercept(design.dosages)
    beta_cell = w @ alpha
    k = design.n_policies
    assign = rng.integers(0, k, size=n)
    counts = np.bincount(assign, minlength=k).astype(float)
    y = beta_cell[assign] + rng.normal(0, sigma, size=n)
    sums = np.bincount(assign, weights=y, minlength=k)
    sumsq = np.bincount(assign, weights=y * y, minlength=k)
    return CellData(counts=counts, sums=sums, sumsq=sumsq)


def generate(config, seed=None, *, n=None, config_id=0, replication=0):
    """Materialize one replication at unit level.

    Returns assignments (canonical policy index per unit), outcomes,
    the realized true marginal coefficient vector and the true pooled
    partition it generates.  The support draws from the stream
    ``(seed, config_id)`` and the data from
    ``(seed, config_id, replication)``.
    """
    seed = config.seed if seed is None else seed
    n = config.n_grid[0] if n is None else int(n)
    truth = draw_configuration(replace(config, seed=seed), config_id)
    alpha = _true_alpha(config, truth, n)
    partition, _ = _true_pools(config.design, truth.support, alpha)
    w = _relation_with_intercept(config.design.dosages)
    beta_cell = w @ alpha
    rng = np.random.default_rng([seed, config_id, replication])
    assign = rng.integers(0, config.design.n_policies, size=n)
    y = beta_cell[assign] + rng.normal(0, config.sigma, size=n)
    alpha.setflags(write=False)
    return SimulatedDraw(
        assignments=assign, y=y, true_alpha=alpha, true_partition=partition
    )


def support_accuracy(estimated, truth):
    """Jaccard index of the two supports; two empty sets count as 1."""
    a, b = set(estimated), set(truth)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def best_inclusion(estimated_partition, estimated_best, true_partition,
                   true_best):
    """(some_best, min_best) indicator pair.

    some_best: the estimated best pool contains at least one member of
    the true best pool.  min_best: it contains the minimum-dosage
    member, the policy a cost-conscious planner would deploy.
    """
    est = set(estimated_partition.pools[estimated_best])
    true_members = set(true_partition.pools[true_best])
    some = 1.0 if est & true_members else 0.0
    minimum = 1.0 if min(true_members) in est else 0.0
    return some, minimum


def best_policy_mse(adjusted_estimates, true_effects):
    """Mean squared error of adjusted estimates against true effects.

    With inputs shaped (configurations, replications) this is the mean
    over configurations of per-configuration mean squared errors; any
    equal-sized nesting gives the same number.
    """
    adjusted = np.asarray(adjusted_estimates, dtype=float)
    true = np.asarray(true_effects, dtype=float)
    return float(np.mean((adjusted - true) ** 2))


def _suff_moments(design, cells):
    w = _relation_with_intercept(design.dosages)
    gram = w.T @ (w * cells.counts[:, None])
    crossprod = w.T @ cells.sums
    return gram, crossprod, float(cells.sumsq.sum())


def _run_tva_cells(design, cells, config):
    """Select, pool, estimate and adjust on one simulated sample.

    Returns (support, partition, estimation, hybrid estimate); the
    last three are None when everything was pruned.
    """
    gram, crossprod, yty = _suff_moments(design, cells)
    n = cells.n
    if config.selector == "backward":
        res = backward_eliminate_moments(
            gram, crossprod, yty, n, config.p_threshold
        )
    else:
        res = lasso_from_moments(gram, crossprod, config.lasso_penalty)
    support = res.support
    partition = pool(design, support)
    if partition.n_pools == 0:
        return support, None, None, None
    est = fit_from_cell_stats(partition, cells.counts, cells.sums, cells.sumsq)
    best = best_policy(est)
    hyb = hybrid(est.eta_hat, est.vcov, config.alpha, config.beta,
                 winner=best.pool)
    return support, partition, est, hyb


def _singleton_partition(design, counts):
    """Per-cell partition over nonempty treated cells (the OLS comparator)."""
    occupied = [k for k in range(1, design.n_policies) if counts[k] > 0]
    policies_idx = tuple((k,) for k in occupied)
    policies = enumerate_policies(design)
    labels = tuple(format_policy(policies[k]) for k in occupied)
    control = tuple(
        [0] + [k for k in range(1, design.n_policies) if counts[k] <= 0]
    )
    return PooledPartition(
        design=design,
        pools=policies_idx,
        control_pool=control,
        pool_labels=labels,
        signatures=tuple(frozenset([k]) for k in occupied),
    )


def _run_ols_cells(design, cells):
    """Direct per-cell OLS with the pure conditional adjustment.

    The correction is capped at ten standard errors of the winning
    cell.  Without a cap a photo-finish winner drags its
    median-unbiased location arbitrarily far down (the estimate is of
    order 1/margin), and the comparator's error would be dominated by
    a handful of degenerate draws instead of the systematic curse this
    benchmark is meant to exhibit.
    """
    partition = _singleton_partition(design, cells.counts)
    est = fit_from_cell_stats(partition, cells.counts, cells.sums, cells.sumsq)
    best = best_policy(est)
    w = best.pool
    naive = float(est.eta_hat[w])
    sigma = float(np.sqrt(est.vcov[w, w]))
    bounds = truncation_bounds(est.eta_hat, est.vcov, w)
    adjusted = conditional_median_estimate(naive, sigma**2, bounds)
    adjusted = float(np.clip(adjusted, naive - 10 * sigma, naive + 10 * sigma))
    return partition, est, w, adjusted


@dataclass(frozen=True)
class StudyReport:
    """Long-format metric rows plus per-(estimator, metric, n) means.

    ``rows`` holds one dict per (estimator, metric, n, configuration,
    replication); ``summary`` nests estimator, then metric, then n.
    Identical configuration and seed give a bitwise-identical report.
    """

    config: dict
    rows: tuple
    summary: dict
    errors: tuple = ()

    def to_json_dict(self):
        return {
            "config": self.config,
            "summary": {
                est: {metric: {str(n): v for n, v in by_n.items()}
                      for metric, by_n in by_metric.items()}
                for est, by_metric in self.summary.items()
            },
            "errors": list(self.errors),
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["estimator", "metric", "n", "config",
                                "replication", "value"]
            )
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def run_study(config, estimators=("tva", "direct_ols")):
    """Full grid over configurations, the n grid and replications.

    Per replication and estimator the four metrics are recorded as
    long-format rows; failures are recorded per replication and never
    abort the study.
    """
    design = config.design
    rows = []
    errors = []
    for cfg_id in range(config.configurations):
        truth = draw_configuration(config, cfg_id)
        for n in config.n_grid:
            alpha = _true_alpha(config, truth, n)
            true_partition, true_etas = _true_pools(
                design, truth.support, alpha
            )
            w_true = int(np.argmax(true_etas))
            eta_best = float(true_etas[w_true])
            best_members = set(true_partition.pools[w_true])
            min_best = min(best_members)
            for rep in range(config.replications):
                rng = np.random.default_rng([config.seed, cfg_id, rep])
                cells = _simulate_cells(design, alpha, n, config.sigma, rng)

                def emit(estimator, metric, value):
                    rows.append({
                        "estimator": estimator, "metric": metric, "n": n,
                        "config": cfg_id, "replication": rep,
                        "value": float(value),
                    })

                if "tva" in estimators:
                    try:
                        support, partition, est, hyb = _run_tva_cells(
                            design, cells, config
                        )
                        emit("tva", "support_accuracy",
                             support_accuracy(support, truth.support))
                        if partition is None:
                            emit("tva", "some_best", 0.0)
                            emit("tva", "min_best", 0.0)
                            emit("tva", "mse", eta_best**2)
                        else:
                            est_best = hyb.best_pool
                            some, minimum = best_inclusion(
                                partition, est_best, true_partition, w_true
                            )
                            emit("tva", "some_best", some)
                            emit("tva", "min_best", minimum)
                            emit("tva", "mse",
                                 (hyb.adjusted_point - eta_best) ** 2)
                    except TVAError as exc:
                        errors.append({"estimator": "tva", "n": n,
                                       "config": cfg_id, "replication": rep,
                                       "error": str(exc)})
                if "direct_ols" in estimators:
                    try:
                        partition_o, est_o, w_o, adjusted = _run_ols_cells(
                            design, cells
                        )
                        cell = partition_o.pools[w_o][0]
                        emit("direct_ols", "some_best",
                             1.0 if cell in best_members else 0.0)
                        emit("direct_ols", "min_best",
                             1.0 if cell == min_best else 0.0)
                        emit("direct_ols", "mse", (adjusted - eta_best) ** 2)
                    except TVAError as exc:
                        errors.append({"estimator": "direct_ols", "n": n,
                                       "config": cfg_id, "replication": rep,
                                       "error": str(exc)})
    summary = {}
    for row in rows:
        by_metric = summary.setdefault(row["estimator"], {})
        by_n = by_metric.setdefault(row["metric"], {})
        by_n.setdefault(row["n"], []).append(row["value"])
    summary = {
        est: {metric: {n: float(np.mean(vals)) for n, vals in by_n.items()}
              for metric, by_n in by_metric.items()}
        for est, by_metric in summary.items()
    }
    return StudyReport(
        config=config.to_dict(), rows=tuple(rows), summary=summary,
        errors=tuple(errors),
    )


@dataclass(frozen=True)
class StabilityReport:
    """Bootstrap stability of the full pipeline on one dataset."""

    replicates: int
    support_stability: float
    best_policy_distribution: tuple
    adjusted_mean: float
    adjusted_sd: float
    adjusted_quantiles: tuple
    base_support_size: int
    base_best_policy: object
    failed_replicates: int

    def to_json_dict(self):
        d = asdict(self)
        d["best_policy_distribution"] = [
            {"best_policy": k, "count": v}
            for k, v in self.best_policy_distribution
        ]
        return d


def bootstrap_stability(dataset, pipeline_config=None, B=200,
                        stratify_by_policy=True, seed=0):
    """Rerun the pipeline on B resampled datasets and report stability.

    Stratified resampling draws, within every policy cell, as many
    units with replacement as the cell originally had, so no cell can
    empty; plain resampling redraws the whole sample and retries (up to
    100 times) whenever a previously occupied cell empties.

    Reports the fraction of replicates whose selected support equals
    the original, the distribution of the best pooled policy, and the
    spread of the adjusted best-policy estimate.
    """
    from . import pipeline as pl

    config = pipeline_config if pipeline_config is not None else pl.PipelineConfig()
    base = pl.run_for_bootstrap(dataset, config, None)
    assign = np.asarray(dataset.assignments_index())
    n = assign.shape[0]
    k = dataset.design.n_policies
    occupied = np.bincount(assign, minlength=k) > 0
    by_cell = [np.nonzero(assign == c)[0] for c in range(k) if (assign == c).any()]

    matches = 0
    best_counts = {}
    adjusted = []
    failures = 0
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        if stratify_by_policy:
            parts = [
                cell[rng.integers(0, cell.shape[0], size=cell.shape[0])]
                for cell in by_cell
            ]
            idx = np.concatenate(parts)
        else:
            for _ in range(100):
                idx = rng.integers(0, n, size=n)
                still = np.bincount(assign[idx], minlength=k) > 0
                if np.array_equal(still, occupied):
                    break
            else:
                raise TVAError(
                    "plain bootstrap kept emptying design cells; "
                    "use stratified resampling"
                )
        try:
            out = pl.run_for_bootstrap(dataset, config, idx)
        except TVAError:
            failures += 1
            continue
        if out["support"] == base["support"]:
            matches += 1
        label = out["best_policy"]
        best_counts[label] = best_counts.get(label, 0) + 1
        if out["adjusted"] is not None:
            adjusted.append(out["adjusted"])
    done = B - failures
    adj = np.array(adjusted) if adjusted else np.zeros(0)
    dist = tuple(sorted(best_counts.items(),
                        key=lambda kv: (-kv[1], str(kv[0]))))
    return StabilityReport(
        replicates=B,
        support_stability=matches / done if done else 0.0,
        best_policy_distribution=dist,
        adjusted_mean=float(adj.mean()) if adj.size else float("nan"),
        adjusted_sd=float(adj.std(ddof=1)) if adj.size > 1 else float("nan"),
        adjusted_quantiles=tuple(
            float(q) for q in np.quantile(adj, [0.05, 0.25, 0.5, 0.75, 0.95])
        ) if adj.size else (),
        base_support_size=len(base["support"]),
        base_best_policy=base["best_policy"],
        failed_replicates=failures,
    )
