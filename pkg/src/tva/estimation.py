"""Post-selection estimation of pooled policy effects.

The pooled regression fits outcome on one dummy per non-control pool,
with the control pool as reference, so each coefficient is a pooled
policy effect relative to control.  The full empirical plumbing is
supported: observation weights (WLS), up to three absorbed fixed-effect
factors (iterative weighted demeaning to 1e-10), heteroskedasticity-
robust (HC1) or cluster-robust (CR1) covariance.

A separate fast path fits the same regression from per-cell sufficient
statistics (counts, sums, sums of squares); it is exact for the
unweighted no-fixed-effect case and is what the simulation harness
uses, where unit-level matrices would dominate the runtime.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCellError, SchemaError, SingularDesignError

__all__ = [
    "EstimationResult",
    "BestPolicy",
    "pooled_dummies",
    "fit",
    "fit_pooled",
    "fit_from_cell_stats",
    "best_policy",
]

DEMEAN_TOL = 1e-10
MAX_FACTORS = 3


@dataclass(frozen=True)
class EstimationResult:
    """Pooled-effect estimates and their covariance.

    ``eta_hat[p]`` is the effect of pool p relative to the control
    pool; the control pool itself has no row (reference category).
    ``pool_min_policy`` carries each pool's minimal member in canonical
    order, the deterministic tie-break key for best-policy selection.
    """

    eta_hat: np.ndarray
    vcov: np.ndarray
    n_effective: int
    dof: int
    r_squared: float
    control_mean: float
    pool_labels: tuple
    pool_counts: tuple
    pool_min_policy: tuple
    diagnostics: dict = field(default_factory=dict)

    @property
    def std_errors(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))


@dataclass(frozen=True)
class BestPolicy:
    """Argmax pool index (0-based), or the no-effective-policy flag."""

    pool: object
    no_effective_policy: bool = False


def pooled_dummies(partition, assignments):
    """Indicator matrix Z over non-control pools.

    ``Z[i, p] = 1`` iff unit i's assigned policy belongs to pool p; the
    control pool is the omitted reference.  Every non-control pool must
    have at least one assigned unit.

    Parameters
    ----------
    assignments : ndarray of shape (n,)
        Canonical policy indices per unit.
    """
    idx = np.asarray(assignments, dtype=int).ravel()
    owner = partition.pool_of()
    unit_pool = owner[idx]
    z = np.zeros((idx.shape[0], partition.n_pools))
    treated = unit_pool >= 0
    z[np.nonzero(treated)[0], unit_pool[treated]] = 1.0
    empty = np.nonzero(z.sum(axis=0) == 0)[0]
    if empty.size:
        labels = [partition.pool_labels[p] for p in empty]
        raise EmptyCellError(f"pools with no assigned units: {labels}")
    return z


def _factor_codes(fixed_effects, n):
    """Normalize the fixed-effects argument to a list of code arrays."""
    if fixed_effects is None:
        return [], []
    if not isinstance(fixed_effects, (list, tuple)):
        fixed_effects = [fixed_effects]
    if len(fixed_effects) > MAX_FACTORS:
        raise SchemaError(
            f"at most {MAX_FACTORS} fixed-effect factors supported, "
            f"got {len(fixed_effects)}"
        )
    codes, levels = [], []
    for factor in fixed_effects:
        arr = np.asarray(factor).ravel()
        if arr.shape[0] != n:
            raise SchemaError("fixed-effect factor length does not match data")
        _, code = np.unique(arr, return_inverse=True)
        codes.append(code)
        levels.append(int(code.max()) + 1)
    return codes, levels


def _demean(mat, codes, w, tol=DEMEAN_TOL, max_sweeps=200):
    """Iterated weighted group demeaning over several factors."""
    out = mat.copy()
    totals = [np.bincount(c, weights=w) for c in codes]
    for _ in range(max_sweeps):
        shift = 0.0
        for code, total in zip(codes, totals):
            for j in range(out.shape[1]):
                means = np.bincount(code, weights=w * out[:, j]) / total
                out[:, j] -= means[code]
                shift = max(shift, np.abs(means).max())
        if shift < tol:
            return out
    raise SingularDesignError("fixed-effect demeaning did not converge")


def _check_rank(aw, pool_labels, first_pool_col):
    sv = np.linalg.svd(aw, compute_uv=False)
    if sv[-1] > 1e-10 * sv[0]:
        return
    # identify the offending column: the one best explained by the rest
    worst, worst_j = -1.0, 0
    for j in range(aw.shape[1]):
        rest = np.delete(aw, j, axis=1)
        coef, res, _, _ = np.linalg.lstsq(rest, aw[:, j], rcond=None)
        resid = aw[:, j] - rest @ coef
        explained = 1.0 - (resid @ resid) / max(aw[:, j] @ aw[:, j], 1e-300)
        if explained > worst:
            worst, worst_j = explained, j
    p = worst_j - first_pool_col
    name = pool_labels[p] if 0 <= p < len(pool_labels) else f"column {worst_j}"
    raise SingularDesignError(
        f"design is collinear after absorption; offending pool: {name}"
    )


def fit(z, y, weights=None, fixed_effects=None, clusters=None, *,
        pool_labels=None, pool_min_policy=None):
    """Weighted pooled-dummy regression with robust covariance.

    Parameters
    ----------
    z : ndarray of shape (n, P)
        Pool indicators from :func:`pooled_dummies`; an intercept is
        added internally (or absorbed by the fixed effects).
    weights : ndarray, optional
        Positive observation weights (WLS).
    fixed_effects : array or sequence of arrays, optional
        Up to three categorical factors, absorbed by iterated weighted
        demeaning rather than explicit dummies.
    clusters : ndarray, optional
        Cluster labels; switches the covariance from HC1 to CR1 with
        the small-sample factor ``G/(G-1) * (n-1)/(n-k)``.  Singleton
        clusters are allowed and counted in the diagnostics.

    Returns
    -------
    EstimationResult
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    y = np.asarray(y, dtype=float).ravel()
    n, p = z.shape
    if y.shape[0] != n:
        raise SchemaError("outcome length does not match dummy matrix")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape[0] != n:
            raise SchemaError("weights length does not match data")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise SchemaError("weights must be positive and finite")
    codes, levels = _factor_codes(fixed_effects, n)

    control_rows = z.sum(axis=1) == 0
    if not control_rows.any():
        raise EmptyCellError("no control-pool units in the data")
    control_mean = float(np.average(y[control_rows], weights=w[control_rows]))

    if codes:
        stacked = _demean(np.column_stack([z, y]), codes, w)
        a, y_c = stacked[:, :p], stacked[:, p]
        first_pool_col = 0
        absorbed = 1 + sum(l - 1 for l in levels)
    else:
        a, y_c = np.column_stack([np.ones(n), z]), y
        first_pool_col = 1
        absorbed = 0
    k_params = a.shape[1] + absorbed
    dof = n - k_params
    if dof <= 0:
        raise SingularDesignError(f"not enough data: n={n}, parameters={k_params}")

    sw = np.sqrt(w)
    aw, yw = a * sw[:, None], y_c * sw
    labels = tuple(pool_labels) if pool_labels is not None else tuple(
        f"pool_{i}" for i in range(p)
    )
    if a.shape[1]:
        _check_rank(aw, labels, first_pool_col)
        coef, _, _, _ = np.linalg.lstsq(aw, yw, rcond=None)
    else:
        coef = np.zeros(0)
    resid = y_c - a @ coef

    bread = np.linalg.inv(aw.T @ aw) if a.shape[1] else np.zeros((0, 0))
    scores = a * (w * resid)[:, None]
    diagnostics = {"absorbed_levels": tuple(levels)}
    if clusters is None:
        meat = scores.T @ scores
        vcov_full = bread @ meat @ bread * (n / dof)
    else:
        labels_g = np.asarray(clusters).ravel()
        if labels_g.shape[0] != n:
            raise SchemaError("cluster labels length does not match data")
        _, gcode = np.unique(labels_g, return_inverse=True)
        g = int(gcode.max()) + 1
        sums = np.zeros((g, a.shape[1]))
        np.add.at(sums, gcode, scores)
        meat = sums.T @ sums
        vcov_full = bread @ meat @ bread * (g / (g - 1)) * ((n - 1) / dof)
        singleton = int((np.bincount(gcode) == 1).sum())
        diagnostics["cluster_count"] = g
        diagnostics["singleton_clusters"] = singleton

    rss = float(w @ resid**2)
    centered = y_c - np.average(y_c, weights=w)
    tss = float(w @ centered**2)
    r_squared = 1.0 - rss / tss if tss > 0 else 1.0

    eta = coef[first_pool_col:]
    vcov = vcov_full[first_pool_col:, first_pool_col:]
    eta = np.ascontiguousarray(eta)
    vcov = np.ascontiguousarray((vcov + vcov.T) / 2.0)
    eta.setflags(write=False)
    vcov.setflags(write=False)
    counts = tuple(int(c) for c in (z > 0).sum(axis=0))
    min_policy = tuple(pool_min_policy) if pool_min_policy is not None else tuple(
        range(p)
    )
    return EstimationResult(
        eta_hat=eta, vcov=vcov, n_effective=n, dof=dof, r_squared=r_squared,
        control_mean=control_mean, pool_labels=labels, pool_counts=counts,
        pool_min_policy=min_policy, diagnostics=diagnostics,
    )


def fit_pooled(partition, assignments, y, **kwargs):
    """Convenience wrapper: build the dummies from a partition and fit."""
    z = pooled_dummies(partition, assignments)
    return fit(
        z, y,
        pool_labels=partition.pool_labels,
        pool_min_policy=tuple(min(m) for m in partition.pools),
        **kwargs,
    )


def fit_from_cell_stats(partition, counts, sums, sumsq):
    """Pooled regression from per-cell sufficient statistics.

    Exact for the unweighted, no-fixed-effect case: the dummy
    regression coefficients are pool means minus the control mean, and
    the HC1 covariance needs only within-group residual sums of
    squares, all computable from cell counts, sums and sums of squares.

    Parameters
    ----------
    counts, sums, sumsq : ndarray of shape (K,)
        Per-cell number of units, outcome sums, outcome square sums.
    """
    counts = np.asarray(counts, dtype=float)
    sums = np.asarray(sums, dtype=float)
    sumsq = np.asarray(sumsq, dtype=float)
    n = float(counts.sum())
    p = partition.n_pools

    def group(cells):
        c = counts[list(cells)].sum()
        s = sums[list(cells)].sum()
        q = sumsq[list(cells)].sum()
        return c, s, q

    n0, s0, q0 = group(partition.control_pool)
    if n0 <= 0:
        raise EmptyCellError("control pool has no assigned units")
    y0 = s0 / n0
    ss0 = q0 - n0 * y0**2
    eta = np.empty(p)
    npool = np.empty(p)
    ss_within = np.empty(p)
    for i, members in enumerate(partition.pools):
        c, s, q = group(members)
        if c <= 0:
            raise EmptyCellError(
                f"pool {partition.pool_labels[i]} has no assigned units"
            )
        mean = s / c
        npool[i] = c
        eta[i] = mean - y0
        ss_within[i] = q - c * mean**2
    dof = n - (p + 1)
    if dof <= 0:
        raise SingularDesignError("not enough observations for the pooled fit")
    hc1 = n / dof
    vcov = np.full((p, p), hc1 * ss0 / n0**2)
    vcov[np.diag_indices(p)] += hc1 * ss_within / npool**2

    rss = ss0 + ss_within.sum()
    ybar = sums.sum() / n
    tss = sumsq.sum() - n * ybar**2
    eta.setflags(write=False)
    vcov.setflags(write=False)
    return EstimationResult(
        eta_hat=eta, vcov=vcov, n_effective=int(n), dof=int(dof),
        r_squared=1.0 - rss / tss if tss > 0 else 1.0,
        control_mean=float(y0),
        pool_labels=partition.pool_labels,
        pool_counts=tuple(int(c) for c in npool),
        pool_min_policy=tuple(min(m) for m in partition.pools),
        diagnostics={},
    )


def best_policy(result):
    """Argmax pool of the estimated effects.

    Exact ties break toward the pool whose minimal-dosage member comes
    first in canonical order.  With zero pools (everything pruned) the
    control is returned with the ``no_effective_policy`` flag.
    """
    eta = result.eta_hat
    if eta.shape[0] == 0:
        return BestPolicy(pool=None, no_effective_policy=True)
    order = sorted(
        range(eta.shape[0]),
        key=lambda i: (-eta[i], result.pool_min_policy[i]),
    )
    return BestPolicy(pool=order[0], no_effective_policy=False)
