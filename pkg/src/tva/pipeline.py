"""End-to-end analysis pipeline on real datasets.

The pipeline maps a raw trial table to a final policy recommendation in
five wrapped stages: design (marginal design matrix over realizable
policies), precondition (weighting, fixed-effect absorption, Puffer),
selection, pooling plus estimation, and winner's-curse adjustment.
Stage failures re-raise as :class:`~tva.errors.StageError` carrying the
stage name and a remediation hint, with the underlying exit code.

Arms may be mutually exclusive (for example a flat and a sloped
incentive that cannot both be on).  The lattice is still the full cross
product; policies violating an exclusivity group are structurally
unrealizable, their design columns are dropped before selection, and
selected supports are reported in full-lattice indices.  Cells that are
unrealizable carry no units by construction and are fine; a realizable
cell with no observations makes the marginal design singular and is an
error.

Reports serialize to JSON with sorted keys, so byte-identical inputs
produce byte-identical reports.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (
    SchemaError,
    SingularDesignError,
    StageError,
    TVAError,
)
from .estimation import best_policy, fit_pooled
from .lattice import (
    FactorialDesign,
    enumerate_policies,
    marginal_matrix,
)
from .pooling import format_policy, pool
from .precondition import puffer
from .selection import backward_eliminate, lambda_sweep, lasso
from .winners_curse import hybrid

__all__ = [
    "ArmSpec",
    "DatasetSchema",
    "Dataset",
    "PipelineConfig",
    "PipelineReport",
    "ingest",
    "run_pipeline",
    "sweep_pipeline",
    "run_for_bootstrap",
    "CONFIG_VERSION",
]

CONFIG_VERSION = 1
_MAX_LISTED = 10


@dataclass(frozen=True)
class ArmSpec:
    """One treatment arm: a data column and its ordered dosage levels.

    ``levels[0]`` is the inactive level (dosage 0); the rest are
    increasing dosages.  Raw column values match levels by their
    stripped string form, so integer-coded and string-coded columns
    both work.
    """

    name: str
    column: str
    levels: tuple

    def __post_init__(self):
        if len(self.levels) < 2:
            raise SchemaError(
                f"arm {self.name!r} needs at least 2 levels, got {len(self.levels)}"
            )
        keys = [str(l).strip() for l in self.levels]
        if len(set(keys)) != len(keys):
            raise SchemaError(f"arm {self.name!r} has duplicate levels")

    def level_map(self):
        return {str(l).strip(): i for i, l in enumerate(self.levels)}


@dataclass(frozen=True)
class DatasetSchema:
    """Declares how a raw table maps onto a factorial design."""

    outcome: str
    arms: tuple
    weight: str = None
    cluster: str = None
    fixed_effects: tuple = ()
    exclusive: tuple = ()

    def __post_init__(self):
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate arm names in schema")
        if not self.arms:
            raise SchemaError("schema declares no arms")
        known = set(names)
        for group in self.exclusive:
            if len(group) < 2:
                raise SchemaError("exclusivity groups need at least 2 arms")
            missing = [n for n in group if n not in known]
            if missing:
                raise SchemaError(f"exclusivity group names unknown: {missing}")

    @property
    def design(self):
        return FactorialDesign(tuple(len(a.levels) for a in self.arms))

    @classmethod
    def from_dict(cls, d):
        try:
            arms = tuple(
                ArmSpec(a["name"], a["column"], tuple(a["levels"]))
                for a in d["arms"]
            )
            return cls(
                outcome=d["outcome"],
                arms=arms,
                weight=d.get("weight"),
                cluster=d.get("cluster"),
                fixed_effects=tuple(d.get("fixed_effects", ())),
                exclusive=tuple(tuple(g) for g in d.get("exclusive", ())),
            )
        except KeyError as exc:
            raise SchemaError(f"schema is missing required key {exc}") from exc

    def to_dict(self):
        return {
            "outcome": self.outcome,
            "arms": [
                {"name": a.name, "column": a.column, "levels": list(a.levels)}
                for a in self.arms
            ],
            "weight": self.weight,
            "cluster": self.cluster,
            "fixed_effects": list(self.fixed_effects),
            "exclusive": [list(g) for g in self.exclusive],
        }


def _realizable_mask(design, schema):
    policies = enumerate_policies(design)
    mask = np.ones(design.n_policies, dtype=bool)
    position = {a.name: m for m, a in enumerate(schema.arms)}
    for group in schema.exclusive:
        cols = [position[name] for name in group]
        mask &= (policies[:, cols] > 0).sum(axis=1) <= 1
    return mask


@dataclass(frozen=True)
class Dataset:
    """A validated, design-indexed dataset ready for the pipeline."""

    design: FactorialDesign
    schema: DatasetSchema
    assignments: np.ndarray
    policy_index: np.ndarray
    y: np.ndarray
    realizable: np.ndarray
    weights: np.ndarray = None
    clusters: np.ndarray = None
    fixed_effects: tuple = ()

    @property
    def n(self):
        return int(self.y.shape[0])

    def assignments_index(self):
        return self.policy_index

    def cell_counts(self):
        return np.bincount(self.policy_index, minlength=self.design.n_policies)

    def subset(self, rows):
        """Row-resampled copy (used by the bootstrap)."""
        rows = np.asarray(rows, dtype=int)
        return Dataset(
            design=self.design,
            schema=self.schema,
            assignments=self.assignments[rows],
            policy_index=self.policy_index[rows],
            y=self.y[rows],
            realizable=self.realizable,
            weights=None if self.weights is None else self.weights[rows],
            clusters=None if self.clusters is None else self.clusters[rows],
            fixed_effects=tuple(f[rows] for f in self.fixed_effects),
        )


def _listed(rows):
    shown = [int(r) for r in rows[:_MAX_LISTED]]
    more = f" (+{len(rows) - _MAX_LISTED} more)" if len(rows) > _MAX_LISTED else ""
    return f"{shown}{more}"


def ingest(data, schema):
    """Validate a raw table against a schema and index it on the lattice.

    Parameters
    ----------
    data : str, Path or pandas.DataFrame
        CSV path or an already loaded frame.
    schema : DatasetSchema

    Raises
    ------
    SchemaError
        Missing columns, unmappable arm levels (with offending 0-based
        data rows), non-numeric outcomes or weights, or rows activating
        more than one arm of an exclusivity group.
    """
    frame = data if isinstance(data, pd.DataFrame) else pd.read_csv(data)
    frame = frame.reset_index(drop=True)
    needed = [schema.outcome] + [a.column for a in schema.arms]
    needed += [c for c in (schema.weight, schema.cluster) if c]
    needed += list(schema.fixed_effects)
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise SchemaError(f"data is missing columns {missing}")

    n = len(frame)
    if n == 0:
        raise SchemaError("data has no rows")
    design = schema.design
    dosage = np.empty((n, design.arm_count), dtype=int)
    for m, arm in enumerate(schema.arms):
        mapping = arm.level_map()
        raw = frame[arm.column].map(lambda v: str(v).strip())
        codes = raw.map(mapping)
        bad = np.nonzero(codes.isna().to_numpy())[0]
        if bad.size:
            values = sorted(set(raw.iloc[bad[:_MAX_LISTED]]))
            raise SchemaError(
                f"arm {arm.name!r}: unmapped values {values} "
                f"in data rows {_listed(bad)}"
            )
        dosage[:, m] = codes.to_numpy(dtype=int)

    position = {a.name: m for m, a in enumerate(schema.arms)}
    for group in schema.exclusive:
        cols = [position[name] for name in group]
        both = np.nonzero((dosage[:, cols] > 0).sum(axis=1) > 1)[0]
        if both.size:
            raise SchemaError(
                f"exclusivity violated for arms {list(group)}: "
                f"{both.size} rows activate more than one, "
                f"data rows {_listed(both)}"
            )

    y = pd.to_numeric(frame[schema.outcome], errors="coerce").to_numpy(float)
    bad = np.nonzero(~np.isfinite(y))[0]
    if bad.size:
        raise SchemaError(
            f"outcome {schema.outcome!r} is not finite numeric "
            f"in data rows {_listed(bad)}"
        )

    weights = None
    if schema.weight:
        weights = pd.to_numeric(frame[schema.weight], errors="coerce").to_numpy(float)
        bad = np.nonzero(~(np.isfinite(weights) & (weights > 0)))[0]
        if bad.size:
            raise SchemaError(
                f"weight {schema.weight!r} must be positive and finite; "
                f"bad data rows {_listed(bad)}"
            )
    clusters = frame[schema.cluster].to_numpy() if schema.cluster else None
    fes = tuple(frame[c].to_numpy() for c in schema.fixed_effects)

    weightvec = np.fromiter(
        (int(np.prod(design.dosages[m + 1:])) for m in range(design.arm_count)),
        dtype=int,
    )
    index = dosage @ weightvec
    realizable = _realizable_mask(design, schema)
    for arr in (dosage, index, y):
        arr.setflags(write=False)
    return Dataset(
        design=design, schema=schema, assignments=dosage, policy_index=index,
        y=y, realizable=realizable, weights=weights, clusters=clusters,
        fixed_effects=fes,
    )


@dataclass(frozen=True)
class PipelineConfig:
    """Versioned run configuration (see :meth:`from_file` for the JSON)."""

    schema: DatasetSchema = None
    selector: str = "backward"
    p_threshold: float = 5e-13
    lasso_penalty: float = 1.0
    alpha: float = 0.05
    beta: float = 0.005
    weighted_selection: bool = True
    lambda_grid: tuple = ()
    bootstrap_replicates: int = 200
    bootstrap_stratify: bool = True

    def __post_init__(self):
        if self.selector not in ("backward", "lasso"):
            raise SchemaError(f"unknown selector {self.selector!r}")
        if not 0 < self.beta < self.alpha < 1:
            raise SchemaError(
                f"need 0 < beta < alpha < 1, got alpha={self.alpha}, beta={self.beta}"
            )

    @classmethod
    def from_file(cls, path):
        """Parse a JSON config.

        Layout::

            {
              "version": 1,
              "schema": { "outcome": ..., "arms": [...], ... },
              "selector": {"method": "backward", "p_threshold": 5e-13},
              "alpha": 0.05, "beta": 0.005,
              "weighted_selection": true,
              "lambda_grid": [0.5, 1.0],
              "bootstrap": {"replicates": 200, "stratify": true}
            }

        Unknown top-level keys are rejected, and the version must match
        ``CONFIG_VERSION``.
        """
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"config is not valid JSON: {exc}") from exc
        version = raw.get("version")
        if version != CONFIG_VERSION:
            raise SchemaError(
                f"config version {version!r} unsupported (expected {CONFIG_VERSION})"
            )
        allowed = {"version", "schema", "selector", "alpha", "beta",
                   "weighted_selection", "lambda_grid", "bootstrap"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise SchemaError(f"unknown config keys {unknown}")
        if "schema" not in raw:
            raise SchemaError("config is missing the 'schema' section")
        sel = raw.get("selector", {})
        boot = raw.get("bootstrap", {})
        return cls(
            schema=DatasetSchema.from_dict(raw["schema"]),
            selector=sel.get("method", "backward"),
            p_threshold=float(sel.get("p_threshold", 5e-13)),
            lasso_penalty=float(sel.get("penalty", 1.0)),
            alpha=float(raw.get("alpha", 0.05)),
            beta=float(raw.get("beta", 0.005)),
            weighted_selection=bool(raw.get("weighted_selection", True)),
            lambda_grid=tuple(raw.get("lambda_grid", ())),
            bootstrap_replicates=int(boot.get("replicates", 200)),
            bootstrap_stratify=bool(boot.get("stratify", True)),
        )

    def to_dict(self):
        sel = {"method": self.selector}
        if self.selector == "backward":
            sel["p_threshold"] = self.p_threshold
        else:
            sel["penalty"] = self.lasso_penalty
        return {
            "version": CONFIG_VERSION,
            "selector": sel,
            "alpha": self.alpha,
            "beta": self.beta,
            "weighted_selection": self.weighted_selection,
            "lambda_grid": list(self.lambda_grid),
            "bootstrap": {
                "replicates": self.bootstrap_replicates,
                "stratify": self.bootstrap_stratify,
            },
        }


def _wrap(stage, hint, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (TVAError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(stage, hint, exc) from exc


def _selection_system(dataset, config):
    """Build the (possibly weighted, demeaned) system to precondition.

    Returns (rows-scaled X, y, keep columns, dof correction, global
    column map): with fixed effects the intercept column demeans to
    zero and is dropped, so nothing is kept unpenalized and the
    absorbed parameter count enters the degrees of freedom instead.
    """
    from .estimation import _demean, _factor_codes

    design = dataset.design
    counts = dataset.cell_counts()
    rcols = np.nonzero(dataset.realizable)[0]
    empty = [k for k in rcols if counts[k] == 0]
    if empty:
        policies = enumerate_policies(design)
        labels = [format_policy(policies[k]) for k in empty]
        raise SingularDesignError(
            f"realizable policy cells with no observations: "
            f"{labels[:_MAX_LISTED]}"
            + (f" (+{len(labels) - _MAX_LISTED} more)"
               if len(labels) > _MAX_LISTED else "")
        )

    x = marginal_matrix(design, dataset.policy_index)[:, rcols]
    y = dataset.y.astype(float)
    w = None
    if dataset.weights is not None and config.weighted_selection:
        w = dataset.weights
    if dataset.fixed_effects:
        codes, levels = _factor_codes(list(dataset.fixed_effects), dataset.n)
        wd = np.ones(dataset.n) if w is None else w
        stacked = _demean(np.column_stack([x[:, 1:], y]), codes, wd)
        x, y = stacked[:, :-1], stacked[:, -1]
        keep = ()
        dof_correction = 1 + sum(l - 1 for l in levels)
        colmap = rcols[1:]
    else:
        keep = (0,)
        dof_correction = 0
        colmap = rcols
    if w is not None:
        sw = np.sqrt(w)
        x = x * sw[:, None]
        y = y * sw
    return x, y, keep, dof_correction, colmap


def _select(dataset, config):
    x, y, keep, dof_correction, colmap = _wrap(
        "precondition",
        "check for empty realizable cells and collinear fixed effects",
        _selection_system, dataset, config,
    )
    pz = _wrap(
        "precondition",
        "the marginal design must have full column rank and n > K",
        puffer, x, y,
    )
    if config.selector == "backward":
        sel = _wrap(
            "selection", "relax the p threshold or pool arms",
            backward_eliminate, pz, p_threshold=config.p_threshold,
            keep=keep, dof_correction=dof_correction,
        )
    else:
        sel = _wrap(
            "selection", "adjust the penalty",
            lasso, pz, lam=config.lasso_penalty, keep=keep,
        )
    support_global = frozenset(int(colmap[j]) for j in sel.support)
    return sel, support_global, colmap


def _estimate_support(dataset, config, support_global):
    """Pool a support, fit the pooled model, adjust the winner."""
    partition = _wrap(
        "pooling", "the selected support may be too dense per profile",
        pool, dataset.design, support_global,
    )
    est = _wrap(
        "estimation", "check pool occupancy and fixed-effect collinearity",
        fit_pooled, partition, dataset.policy_index, dataset.y,
        weights=dataset.weights,
        fixed_effects=list(dataset.fixed_effects) or None,
        clusters=dataset.clusters,
    )
    if partition.n_pools == 0:
        return partition, est, None, None
    best = best_policy(est)
    hyb = _wrap(
        "adjustment", "degenerate covariance for the winning pool",
        hybrid, est.eta_hat, est.vcov, config.alpha, config.beta,
        winner=best.pool,
    )
    return partition, est, best, hyb


@dataclass(frozen=True)
class PipelineReport:
    """Full run record; serializes deterministically."""

    config: dict
    data_summary: dict
    selection: dict
    partition: dict
    estimates: dict
    best_policy: dict
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "config": self.config,
            "data": self.data_summary,
            "selection": self.selection,
            "partition": self.partition,
            "estimates": self.estimates,
            "best_policy": self.best_policy,
            "diagnostics": self.diagnostics,
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def estimate_rows(self):
        """Flat rows for CSV output, one per non-control pool."""
        rows = []
        for i, label in enumerate(self.estimates["pools"]):
            rows.append({
                "pool": i,
                "label": label["label"],
                "eta": label["eta"],
                "se": label["se"],
                "count": label["count"],
                "is_best": int(self.best_policy.get("pool") == i),
            })
        return rows


def run_pipeline(dataset, config):
    """Execute all stages on a dataset and assemble the report."""
    sel, support_global, _ = _select(dataset, config)
    partition, est, best, hyb = _estimate_support(dataset, config, support_global)

    policies = enumerate_policies(dataset.design)
    support_sorted = sorted(support_global)
    local_of = {int(g): j for j, g in enumerate(
        np.nonzero(dataset.realizable)[0]
    )}
    offset = 0 if len(sel.coefficients) == dataset.realizable.sum() else 1
    coef_map = {}
    for g in support_sorted:
        j = local_of[g] - offset
        coef_map[format_policy(policies[g])] = float(sel.coefficients[j])

    selection_section = {
        "selector": sel.selector,
        "support": [int(g) for g in support_sorted],
        "support_policies": [format_policy(policies[g]) for g in support_sorted],
        "marginal_coefficients": coef_map,
        "eliminated": len(sel.trace) if sel.selector.startswith("backward") else None,
    }
    counts = dataset.cell_counts()
    data_section = {
        "n": dataset.n,
        "design": list(dataset.design.dosages),
        "arms": [{"name": a.name, "column": a.column, "levels": list(a.levels)}
                 for a in dataset.schema.arms],
        "outcome": dataset.schema.outcome,
        "weighted": dataset.weights is not None,
        "clustered": dataset.clusters is not None,
        "fixed_effect_columns": list(dataset.schema.fixed_effects),
        "realizable_policies": int(dataset.realizable.sum()),
        "occupied_cells": int((counts > 0).sum()),
    }
    estimates_section = {
        "pools": [
            {
                "label": est.pool_labels[i],
                "eta": float(est.eta_hat[i]),
                "se": float(est.std_errors[i]),
                "count": est.pool_counts[i],
                "min_policy": format_policy(
                    policies[est.pool_min_policy[i]]
                ),
            }
            for i in range(len(est.pool_labels))
        ],
        "vcov": [[float(v) for v in row] for row in np.atleast_2d(est.vcov)]
        if est.eta_hat.shape[0] else [],
        "control_mean": est.control_mean,
        "n": est.n_effective,
        "dof": est.dof,
        "r_squared": est.r_squared,
    }
    if hyb is None:
        best_section = {"no_effective_policy": True, "pool": None}
    else:
        best_section = {
            "no_effective_policy": False,
            "pool": hyb.best_pool,
            "label": est.pool_labels[hyb.best_pool],
            "recommended_policy": format_policy(
                policies[est.pool_min_policy[hyb.best_pool]]
            ),
            "naive": hyb.naive,
            "adjusted": hyb.adjusted_point,
            "ci": list(hyb.hybrid_ci),
            "truncation": [
                None if not np.isfinite(b) else float(b) for b in hyb.truncation
            ],
            "alpha": hyb.alpha,
            "beta": hyb.beta,
            "projection_quantile": hyb.projection,
        }
    diagnostics = {
        "unrealizable_policies": int((~dataset.realizable).sum()),
        "selection_trace_length": len(sel.trace),
    }
    diagnostics.update({
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in est.diagnostics.items()
    })
    return PipelineReport(
        config=config.to_dict(),
        data_summary=data_section,
        selection=selection_section,
        partition=partition.to_json_dict(),
        estimates=estimates_section,
        best_policy=best_section,
        diagnostics=diagnostics,
    )


def sweep_pipeline(dataset, config, lambda_grid=None):
    """LASSO path with the full downstream pipeline per penalty.

    The system is preconditioned once; each penalty reuses it.  Entries
    record per-penalty failures without aborting the sweep.
    """
    grid = tuple(config.lambda_grid if lambda_grid is None else lambda_grid)
    if not grid:
        raise SchemaError("no lambda grid given (config key 'lambda_grid')")
    x, y, keep, _, colmap = _wrap(
        "precondition",
        "check for empty realizable cells and collinear fixed effects",
        _selection_system, dataset, config,
    )
    pz = _wrap(
        "precondition",
        "the marginal design must have full column rank and n > K",
        puffer, x, y,
    )

    def downstream(sel):
        support_global = frozenset(int(colmap[j]) for j in sel.support)
        partition, est, best, hyb = _estimate_support(
            dataset, config, support_global
        )
        if hyb is None:
            return {"best_policy": None, "second_best": None, "naive": None,
                    "adjusted": None, "ci": None}
        runner_up = None
        if est.eta_hat.shape[0] > 1:
            order = sorted(
                range(est.eta_hat.shape[0]),
                key=lambda i: (-est.eta_hat[i], est.pool_min_policy[i]),
            )
            runner_up = est.pool_labels[order[1]]
        return {
            "best_policy": est.pool_labels[hyb.best_pool],
            "second_best": runner_up,
            "naive": hyb.naive,
            "adjusted": hyb.adjusted_point,
            "ci": tuple(hyb.hybrid_ci),
        }

    return lambda_sweep(pz, lambda_grid=grid, downstream=downstream, keep=keep)


def sweep_rows(dataset, entries):
    """Flatten sweep entries to dicts with full-lattice support indices."""
    rcols = np.nonzero(dataset.realizable)[0]
    colmap = rcols[1:] if dataset.fixed_effects else rcols
    rows = []
    for e in entries:
        support = (sorted(int(colmap[j]) for j in e.selection.support)
                   if e.selection is not None else None)
        rows.append({
            "lambda": e.lam,
            "support": support,
            "support_size": None if support is None else len(support),
            "best_policy": e.best_policy,
            "second_best": e.second_best,
            "naive": e.naive,
            "adjusted": e.adjusted,
            "ci": None if e.ci is None else list(e.ci),
            "error": e.error,
        })
    return rows


def run_for_bootstrap(dataset, config, rows):
    """Minimal pipeline pass for stability resampling.

    Returns the selected support (full-lattice indices), the best pool
    label (None when everything pooled into control) and the adjusted
    point estimate.
    """
    data = dataset if rows is None else dataset.subset(rows)
    _, support_global, _ = _select(data, config)
    _, est, best, hyb = _estimate_support(data, config, support_global)
    if hyb is None:
        return {"support": support_global, "best_policy": None, "adjusted": None}
    return {
        "support": support_global,
        "best_policy": est.pool_labels[hyb.best_pool],
        "adjusted": float(hyb.adjusted_point),
    }
