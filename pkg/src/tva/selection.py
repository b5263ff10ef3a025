"""Support selection on the preconditioned marginal regression.

Two selectors are provided.  The LASSO selector exploits that the
Puffer-preconditioned design has orthonormal columns, so the penalized
problem solves in closed form by soft thresholding the column
correlations at ``lambda / 2``; a cyclic coordinate-descent fallback
covers designs that are not exactly orthonormal.  The backward
eliminator mirrors the sequential-deselection variant used on real
data: refit, drop the least significant coordinate while its p-value
exceeds the threshold, repeat.

Backward elimination computes its t statistics from the original-system
moments ``(X'X, X'y, y'y, n)``.  The preconditioned pair ``(FX, Fy)``
cannot supply them: ``Fy`` lies exactly in the column span of ``FX``,
so a least-squares fit of the transformed system has zero residual at
full support and carries no scale information.  The moments travel
inside :class:`~tva.precondition.PufferDecomposition` in factored form,
which also makes the procedure invariant to Puffer row normalization.

The control column is the unpenalized intercept: it is never
thresholded and never deselected, and is excluded from the reported
support (the fitted intercept sits in ``coefficients[0]``).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConvergenceError, SingularDesignError
from .precondition import PufferDecomposition

__all__ = [
    "SelectionResult",
    "SweepEntry",
    "soft_threshold",
    "lasso",
    "lasso_from_moments",
    "backward_eliminate",
    "backward_eliminate_moments",
    "lambda_sweep",
]

ORTHONORMAL_TOL = 1e-8


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of one selection run.

    Fields
    ------
    support : frozenset of int
        Penalized column indices with nonzero coefficient.  The
        intercept column is excluded by convention; an empty support is
        the pure-control model, not an error.
    coefficients : ndarray
        Full coefficient vector, zeros off the support, intercept in
        the keep positions.
    selector : str
        Tag of the form ``lasso(lambda=...)`` or ``backward(p=...)``.
    trace : tuple
        Ordered path records: for the LASSO a single
        ``(lambda, support)`` entry; for backward elimination one
        ``(p_value_dropped, support_after)`` entry per deletion.
    """

    support: frozenset
    coefficients: np.ndarray
    selector: str
    trace: tuple


def soft_threshold(z, t):
    """``sign(z) * max(|z| - t, 0)``, elementwise."""
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _as_system(design_matrix, outcome):
    if isinstance(design_matrix, PufferDecomposition):
        if outcome is not None:
            raise TypeError(
                "pass either a PufferDecomposition or a (matrix, outcome) pair"
            )
        return design_matrix.FX, design_matrix.Fy
    fx = np.asarray(design_matrix, dtype=float)
    fy = np.asarray(outcome, dtype=float).ravel()
    if fx.shape[0] != fy.shape[0]:
        raise SingularDesignError("design rows and outcome length differ")
    return fx, fy


def _coordinate_descent(fx, fy, lam, keep, tol=1e-10, max_sweeps=100_000):
    """Cyclic coordinate descent for the non-orthonormal case."""
    n, k = fx.shape
    col_sq = (fx**2).sum(axis=0)
    if np.any(col_sq <= 0):
        raise SingularDesignError("zero-variance column in the design")
    coef = np.zeros(k)
    resid = fy.copy()
    half = lam / 2.0
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(k):
            old = coef[j]
            z = fx[:, j] @ resid + col_sq[j] * old
            new = z / col_sq[j] if j in keep else soft_threshold(z, half) / col_sq[j]
            if new != old:
                resid -= (new - old) * fx[:, j]
                coef[j] = new
                delta = max(delta, abs(new - old))
        if delta < tol:
            return coef
    raise ConvergenceError(
        f"coordinate descent did not converge in {max_sweeps} sweeps"
    )


def lasso(design_matrix, outcome=None, lam=0.0, *, keep=(0,), method="auto"):
    """LASSO on the preconditioned system with an unpenalized intercept.

    Minimizes ``||Fy - FX a||^2 + lambda * sum_{j not in keep} |a_j|``.
    With orthonormal columns the solution is the closed-form soft
    threshold of ``FX' Fy`` at ``lambda / 2``; otherwise cyclic
    coordinate descent runs to tolerance 1e-10 (at most 1e5 sweeps).

    Parameters
    ----------
    design_matrix : PufferDecomposition or ndarray
    outcome : ndarray, optional
        Required iff ``design_matrix`` is a plain array.
    lam : float
        Nonnegative penalty.
    keep : iterable of int
        Columns never penalized (default: the intercept column 0).
    method : {"auto", "closed_form", "cd"}
        "auto" picks the closed form exactly when ``(FX)'(FX) = I``
        within 1e-8; the explicit choices force one route (used to
        cross-check the two implementations).
    """
    if lam < 0:
        raise ValueError(f"penalty must be nonnegative, got {lam}")
    fx, fy = _as_system(design_matrix, outcome)
    keep = frozenset(int(j) for j in keep if 0 <= int(j) < fx.shape[1])
    gram_dev = np.abs(fx.T @ fx - np.eye(fx.shape[1])).max()
    if method == "auto":
        method = "closed_form" if gram_dev <= ORTHONORMAL_TOL else "cd"
    if method == "closed_form":
        if gram_dev > ORTHONORMAL_TOL:
            raise SingularDesignError(
                f"closed form requires orthonormal columns, deviation {gram_dev:.2e}"
            )
        corr = fx.T @ fy
        coef = soft_threshold(corr, lam / 2.0)
        for j in keep:
            coef[j] = corr[j]
    elif method == "cd":
        coef = _coordinate_descent(fx, fy, lam, keep)
    else:
        raise ValueError(f"unknown method {method!r}")
    support = frozenset(np.nonzero(coef)[0].tolist()) - keep
    coef.setflags(write=False)
    return SelectionResult(
        support=support,
        coefficients=coef,
        selector=f"lasso(lambda={lam:g})",
        trace=((float(lam), support),),
    )


def lasso_from_moments(gram, crossprod, lam, *, keep=(0,)):
    """Closed-form orthonormal LASSO expressed in original coordinates.

    The preconditioned correlations ``FX' Fy`` equal the unpenalized
    least-squares coefficients ``(X'X)^-1 X'y``, so the selector needs
    only the original-system moments.  Used by the simulation harness,
    where the unit-level design is never materialized.
    """
    if lam < 0:
        raise ValueError(f"penalty must be nonnegative, got {lam}")
    gram = np.asarray(gram, dtype=float)
    crossprod = np.asarray(crossprod, dtype=float)
    try:
        ols = np.linalg.solve(gram, crossprod)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("Gram matrix is singular") from exc
    keep = frozenset(int(j) for j in keep)
    coef = soft_threshold(ols, lam / 2.0)
    for j in keep:
        coef[j] = ols[j]
    support = frozenset(np.nonzero(coef)[0].tolist()) - keep
    coef.setflags(write=False)
    return SelectionResult(
        support=support,
        coefficients=coef,
        selector=f"lasso(lambda={lam:g})",
        trace=((float(lam), support),),
    )


def backward_eliminate_moments(
    gram, crossprod, yty, n, p_threshold=5e-13, *, keep=(0,), dof_correction=0
):
    """Backward elimination from sufficient statistics.

    Repeatedly OLS-fits the retained columns, computes classical
    two-sided t-test p-values with ``n - |support| - dof_correction``
    residual degrees of freedom, and drops the worst penalized column
    while its p-value exceeds ``p_threshold``.  Ties break by dropping
    the higher column index.  Eliminating every penalized column is
    legal and leaves the pure-intercept model.

    Parameters
    ----------
    gram, crossprod, yty, n :
        ``X'X``, ``X'y``, ``y'y`` and the number of observations.
    dof_correction : int
        Extra parameters absorbed outside the moments (fixed-effect
        levels), subtracted from the residual degrees of freedom.
    """
    if not 0 < p_threshold <= 1:
        raise ValueError(f"p threshold must lie in (0, 1], got {p_threshold}")
    gram = np.asarray(gram, dtype=float)
    crossprod = np.asarray(crossprod, dtype=float)
    k = gram.shape[0]
    keep = frozenset(int(j) for j in keep if 0 <= int(j) < k)
    support = list(range(k))
    trace = []
    while True:
        gs = gram[np.ix_(support, support)]
        try:
            ginv = np.linalg.inv(gs)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(
                f"singular fit on support of size {len(support)}"
            ) from exc
        coef = ginv @ crossprod[support]
        dof = n - len(support) - dof_correction
        if dof <= 0:
            raise SingularDesignError(
                f"no residual degrees of freedom (n={n}, support={len(support)})"
            )
        rss = max(float(yty - coef @ crossprod[support]), 0.0)
        # on noiseless data rss is pure round-off and the t statistics
        # would compare round-off against round-off; flooring the
        # variance at the response's round-off scale makes round-off
        # sized coefficients insignificant without touching any real
        # residual variance
        sigma2 = max(rss / dof, 1e-20 * yty / max(n, 1), 1e-300)
        se = np.sqrt(sigma2 * np.clip(np.diag(ginv), 0.0, None))
        tstat = np.abs(coef) / np.maximum(se, 1e-300)
        pvalues = 2.0 * stats.t.sf(tstat, dof)
        candidates = [
            (pvalues[i], j, i) for i, j in enumerate(support) if j not in keep
        ]
        if not candidates:
            break
        pmax, jmax, imax = max(candidates)
        if pmax <= p_threshold:
            break
        support.pop(imax)
        trace.append(
            (float(pmax), frozenset(j for j in support if j not in keep))
        )
    coefficients = np.zeros(k)
    coefficients[support] = coef
    coefficients.setflags(write=False)
    return SelectionResult(
        support=frozenset(support) - keep,
        coefficients=coefficients,
        selector=f"backward(p={p_threshold:g})",
        trace=tuple(trace),
    )


def backward_eliminate(design_matrix, outcome=None, p_threshold=5e-13, *,
                       keep=(0,), dof_correction=0):
    """Backward elimination on a regression system.

    Accepts either a :class:`PufferDecomposition` (preferred; its
    factored moments restore the original-system residual variance that
    the transformed pair alone cannot provide) or a plain
    ``(matrix, outcome)`` pair, for which the moments are formed
    directly.
    """
    if isinstance(design_matrix, PufferDecomposition):
        if outcome is not None:
            raise TypeError(
                "pass either a PufferDecomposition or a (matrix, outcome) pair"
            )
        pd = design_matrix
        return backward_eliminate_moments(
            pd.gram(), pd.crossprod(), pd.yty, pd.n, p_threshold,
            keep=keep, dof_correction=dof_correction,
        )
    x = np.asarray(design_matrix, dtype=float)
    y = np.asarray(outcome, dtype=float).ravel()
    return backward_eliminate_moments(
        x.T @ x, x.T @ y, float(y @ y), x.shape[0], p_threshold,
        keep=keep, dof_correction=dof_correction,
    )


@dataclass(frozen=True)
class SweepEntry:
    """One row of a penalty sweep.

    ``selection`` is None exactly when ``error`` is set; the downstream
    fields are None when no downstream runner was supplied or when it
    failed (the error string then says which stage failed).
    """

    lam: float
    selection: object
    best_policy: object = None
    second_best: object = None
    naive: float = None
    adjusted: float = None
    ci: tuple = None
    error: str = None


def lambda_sweep(design_matrix, outcome=None, lambda_grid=(), downstream=None,
                 *, keep=(0,)):
    """Run the selector, and optionally the full pipeline, per penalty.

    Parameters
    ----------
    lambda_grid : sequence of float
        Penalties, sorted ascending.
    downstream : callable, optional
        Maps a :class:`SelectionResult` to a mapping with keys
        ``best_policy``, ``naive``, ``adjusted`` and ``ci`` (the
        pool-estimate-adjust stages).  Errors in either stage are
        recorded on the entry without aborting the sweep.
    keep : iterable of int
        Unpenalized columns, forwarded to :func:`lasso`.

    Returns
    -------
    list of SweepEntry, in grid order.
    """
    grid = [float(l) for l in lambda_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be sorted ascending")
    entries = []
    for lam in grid:
        try:
            result = lasso(design_matrix, outcome, lam, keep=keep)
        except Exception as exc:
            entries.append(SweepEntry(lam=lam, selection=None,
                                      error=f"selection: {exc}"))
            continue
        if downstream is None:
            entries.append(SweepEntry(lam=lam, selection=result))
            continue
        try:
            payload = downstream(result)
            entries.append(SweepEntry(
                lam=lam, selection=result,
                best_policy=payload.get("best_policy"),
                second_best=payload.get("second_best"),
                naive=payload.get("naive"),
                adjusted=payload.get("adjusted"),
                ci=payload.get("ci"),
            ))
        except Exception as exc:
            entries.append(SweepEntry(lam=lam, selection=result,
                                      error=f"downstream: {exc}"))
    return entries
