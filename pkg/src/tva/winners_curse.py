"""Winner's-curse adjustment for the best pooled policy.

Selecting the argmax of noisy effect estimates biases the winning
estimate upward.  Conditional on the selection event, the winning
coordinate is truncated normal on an interval computed from the
competitors; solving the truncated-normal CDF for the location that
puts the observed winner at its median gives a median-unbiased point
estimate, and solving for the tail quantiles gives conditional
confidence bounds.

The hybrid variant first intersects the truncation interval with a
level ``1 - beta`` simultaneous (projection) band around the winner,
which caps how far the adjustment can travel at the cost of a bounded
median bias of ``beta / 2``; its equal-tailed interval at level
``(alpha - beta) / (1 - beta)`` has unconditional coverage between
``1 - alpha`` and ``(1 - alpha) / (1 - beta)``.

All CDF evaluations use error-function forms arranged to stay stable
when root finding drives the location parameter far into a tail, with
log-space differences once both endpoints sit on the same side.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import ConvergenceError

__all__ = [
    "HybridEstimate",
    "truncated_normal_cdf",
    "truncation_bounds",
    "conditional_median_estimate",
    "projection_quantile",
    "hybrid",
]

# Fixed seed for the Monte Carlo max-|normal| quantile: the projection
# band must be a deterministic function of (vcov, beta).
_QUANTILE_SEED = 12345
_QUANTILE_DRAWS = 100_000


def truncated_normal_cdf(x, mu, sigma, lo, hi):
    """CDF of N(mu, sigma^2) truncated to [lo, hi], evaluated at x.

    Returns exactly 0 below ``lo`` and 1 above ``hi``; between the
    bounds the value is computed from normal CDF differences, switching
    to log-space ratios when both endpoints fall on one side of the
    mean (the deep-tail regime where direct subtraction cancels).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    z = (x - mu) / sigma
    # Boundary checks come first so an interval made empty by a moving
    # bound (possible while root finding over the location) degrades to
    # the directionally correct 0 or 1 instead of failing.
    if z <= a:
        return 0.0
    if z >= b:
        return 1.0
    if lo > hi:
        raise ValueError(f"empty truncation interval [{lo}, {hi}]")
    if a > 0:
        # entire interval right of the mean: survival-function form
        la = special.log_ndtr(-a)
        num = -np.expm1(special.log_ndtr(-z) - la)
        den = -np.expm1(special.log_ndtr(-b) - la)
    elif b < 0 and not np.isfinite(a):
        return float(np.exp(special.log_ndtr(z) - special.log_ndtr(b)))
    elif b < 0:
        # anchor the ratio at b: z <= b keeps every exponent
        # nonpositive, where anchoring at a overflows once the
        # interval sits far below the mean
        la = special.log_ndtr(a)
        lb = special.log_ndtr(b)
        lz = special.log_ndtr(z)
        num = np.exp(lz - lb) * -np.expm1(la - lz)
        den = -np.expm1(la - lb)
    else:
        num = special.ndtr(z) - special.ndtr(a)
        den = special.ndtr(b) - special.ndtr(a)
    if den <= 0:
        return 0.5
    return float(min(max(num / den, 0.0), 1.0))


def truncation_bounds(eta_hat, vcov, winner):
    """Truncation interval of the winning coordinate given it won.

    Conditioning on the sufficient statistic
    ``Z = eta_hat - (vcov e_w / vcov[w, w]) * eta_hat[w]``, the event
    "coordinate w is the argmax" confines ``eta_hat[w]`` to
    ``[L, U]``: each competitor j contributes ``Z_j / (1 - c_j)`` as a
    lower bound when its comparison slope ``1 - c_j`` is positive and
    as an upper bound when negative.  With uncorrelated equal-variance
    coordinates this reduces to L = runner-up estimate, U = +inf.
    """
    eta_hat = np.asarray(eta_hat, dtype=float)
    vcov = np.asarray(vcov, dtype=float)
    w = int(winner)
    var_w = vcov[w, w]
    if var_w <= 0:
        raise ValueError(f"winner variance must be positive, got {var_w}")
    slope = vcov[:, w] / var_w
    z = eta_hat - slope * eta_hat[w]
    lo, hi = -np.inf, np.inf
    for j in range(eta_hat.shape[0]):
        if j == w:
            continue
        d = 1.0 - slope[j]
        if d > 1e-12:
            lo = max(lo, z[j] / d)
        elif d < -1e-12:
            hi = min(hi, z[j] / d)
        # |d| ~ 0: unit-slope comparison, carries no constraint
    return lo, hi


def _solve_location(target, x, sigma, lo_fn, hi_fn, half_width, tol):
    """Solve F(x; mu, [lo(mu), hi(mu)]) = target for mu by bisection.

    F is non-increasing in mu (directly and through the moving
    bounds), so bisection applies.  The bracket is widened
    geometrically: a winner that beats the truncation bound by eps
    standard deviations has its median-unbiased location of order
    1/eps standard deviations below, so a fixed span cannot cover
    near-tie selections.  The CDF is tail-stable, making very wide
    brackets safe to evaluate.
    """
    for attempt in range(13):
        width = half_width * 2**attempt
        a, b = x - width, x + width
        fa = truncated_normal_cdf(x, a, sigma, lo_fn(a), hi_fn(a))
        fb = truncated_normal_cdf(x, b, sigma, lo_fn(b), hi_fn(b))
        if fa >= target >= fb:
            break
    else:
        raise ConvergenceError(
            f"location root for target {target} not bracketed within "
            f"{2 * width / sigma:.0f} sigma"
        )
    for _ in range(200):
        mid = 0.5 * (a + b)
        if truncated_normal_cdf(x, mid, sigma, lo_fn(mid), hi_fn(mid)) > target:
            a = mid
        else:
            b = mid
        if b - a < tol:
            break
    return 0.5 * (a + b)


def conditional_median_estimate(naive, variance, bounds):
    """Median-unbiased location for a truncated-normal observation.

    Solves ``F_TN(naive; mu, variance, bounds) = 1/2`` for ``mu`` by
    monotone bisection on ``mu`` in ``naive +- 10 sigma`` (widened once
    if needed), to tolerance ``1e-8 * sigma``.

    Parameters
    ----------
    bounds : pair of float
        Truncation interval; may be infinite on either side.  ``naive``
        must lie inside up to numerical slack.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    sigma = float(np.sqrt(variance))
    slack = 1e-8 * sigma
    if naive < lo - slack or naive > hi + slack:
        raise ValueError(
            f"naive estimate {naive} outside truncation [{lo}, {hi}]"
        )
    if not np.isfinite(lo) and not np.isfinite(hi):
        return float(naive)
    # interior nudge keeps the CDF strictly between 0 and 1 at the bounds
    x = min(max(naive, lo + slack), hi - slack) if np.isfinite(hi) else max(
        naive, lo + slack
    )
    return _solve_location(
        0.5, x, sigma, lambda mu: lo, lambda mu: hi, 10 * sigma, slack
    )


def projection_quantile(vcov, beta):
    """Level ``1 - beta`` quantile of the max-|coordinate| of N(0, corr).

    Exact for one coordinate and for exactly independent coordinates
    (off-diagonal correlations below 1e-12); otherwise estimated by a
    fixed-seed Monte Carlo over 100,000 correlated draws, making the
    value a deterministic function of its inputs.
    """
    vcov = np.asarray(vcov, dtype=float)
    p = vcov.shape[0]
    if p == 1:
        return float(stats.norm.ppf(1 - beta / 2))
    sd = np.sqrt(np.diag(vcov))
    corr = vcov / np.outer(sd, sd)
    off = np.abs(corr[~np.eye(p, dtype=bool)])
    if off.max() < 1e-12:
        return float(stats.norm.ppf((1 + (1 - beta) ** (1 / p)) / 2))
    rng = np.random.default_rng(_QUANTILE_SEED)
    chol = np.linalg.cholesky(corr + 1e-12 * np.eye(p))
    draws = np.abs(rng.standard_normal((_QUANTILE_DRAWS, p)) @ chol.T).max(axis=1)
    return float(np.quantile(draws, 1 - beta))


@dataclass(frozen=True)
class HybridEstimate:
    """Winner's-curse-adjusted best-policy estimate.

    ``truncation`` is the raw conditional interval ``[L, U]`` from the
    selection event (before the projection constraint); ``hybrid_ci``
    is the equal-tailed conditional interval at level
    ``(1 - (alpha - beta) / (1 - beta))``.
    """

    best_pool: int
    naive: float
    truncation: tuple
    adjusted_point: float
    hybrid_ci: tuple
    alpha: float
    beta: float
    projection: float


def hybrid(eta_hat, vcov, alpha=0.05, beta=0.005, *, winner=None,
           projection=None):
    """Hybrid median-unbiased estimate and CI for the best coordinate.

    The truncation interval from :func:`truncation_bounds` is
    intersected with the moving projection band
    ``mu +- projection * sigma`` (a level ``1 - beta`` simultaneous
    band over all coordinates) before solving the truncated-normal
    quantile equations in the location parameter.  A winner with zero
    variance (a saturated noiseless fit) passes through unadjusted with
    a zero-width interval, the ``sigma -> 0`` limit.

    Parameters
    ----------
    winner : int, optional
        Index of the winning coordinate; defaults to the argmax.
    projection : float, optional
        Precomputed :func:`projection_quantile`; supply it when calling
        repeatedly with the same covariance.
    """
    if not 0 < beta < alpha < 1:
        raise ValueError(f"need 0 < beta < alpha < 1, got alpha={alpha}, beta={beta}")
    eta_hat = np.asarray(eta_hat, dtype=float)
    vcov = np.asarray(vcov, dtype=float)
    w = int(np.argmax(eta_hat)) if winner is None else int(winner)
    x = float(eta_hat[w])
    if vcov[w, w] <= 0:
        # saturated noiseless fit: the sigma -> 0 limit passes the
        # winner through with a zero-width interval (a positive-
        # semidefinite vcov with a zero diagonal has a zero row, so the
        # competitor bound degenerates to the runner-up value)
        others = np.delete(eta_hat, w)
        lo = float(others.max()) if others.size else -np.inf
        if x < lo:
            raise ValueError(
                f"winner {w} is not the argmax: estimate {x} below {lo}"
            )
        return HybridEstimate(
            best_pool=w, naive=x, truncation=(lo, np.inf),
            adjusted_point=x, hybrid_ci=(x, x), alpha=float(alpha),
            beta=float(beta), projection=0.0,
        )
    sigma = float(np.sqrt(vcov[w, w]))
    lo, hi = truncation_bounds(eta_hat, vcov, w)
    if not lo - 1e-8 * sigma <= x <= hi + 1e-8 * sigma:
        raise ValueError(
            f"winner {w} is not the argmax: estimate {x} outside [{lo}, {hi}]"
        )
    c = projection_quantile(vcov, beta) if projection is None else float(projection)

    def lo_fn(mu):
        return max(lo, mu - c * sigma)

    def hi_fn(mu):
        return min(hi, mu + c * sigma)

    tol = 1e-8 * sigma
    x_in = min(max(x, lo + tol), hi - tol) if np.isfinite(hi) else max(x, lo + tol)
    point = _solve_location(0.5, x_in, sigma, lo_fn, hi_fn, 12 * sigma, tol)
    tail = (alpha - beta) / (1 - beta) / 2
    ci_hi = _solve_location(tail, x_in, sigma, lo_fn, hi_fn, 12 * sigma, tol)
    ci_lo = _solve_location(1 - tail, x_in, sigma, lo_fn, hi_fn, 12 * sigma, tol)
    return HybridEstimate(
        best_pool=w,
        naive=x,
        truncation=(float(lo), float(hi)),
        adjusted_point=float(point),
        hybrid_ci=(float(ci_lo), float(ci_hi)),
        alpha=float(alpha),
        beta=float(beta),
        projection=float(c),
    )
