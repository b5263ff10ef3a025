"""Truncated-normal machinery and the hybrid best-policy estimate."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import oracles
from tva import (
    ConvergenceError, HybridEstimate, conditional_median_estimate, hybrid,
    projection_quantile, truncated_normal_cdf, truncation_bounds,
)


class TestTruncatedNormalCdf:
    @given(
        st.floats(-3, 3), st.floats(0.5, 2.0),
        st.floats(-4, 1), st.floats(0.1, 5), st.floats(0.05, 0.95),
    )
    @settings(max_examples=100, deadline=None)
    def test_matches_scipy(self, mu, sigma, lo, width, frac):
        hi = lo + width
        x = lo + frac * width
        ours = truncated_normal_cdf(x, mu, sigma, lo, hi)
        assert ours == pytest.approx(
            oracles.truncnorm_cdf(x, mu, sigma, lo, hi), abs=1e-12
        )

    @pytest.mark.parametrize(
        "mu,lo,hi,x",
        [
            (0.0, 8.0, 10.0, 8.5),      # interval deep in the upper tail
            (0.0, -10.0, -8.0, -8.5),   # deep in the lower tail
            (0.0, 12.0, np.inf, 12.3),  # one-sided, survival form
            (0.0, -np.inf, -12.0, -12.3),
            (5.0, 6.0, 40.0, 6.01),
            (100.0, 0.2, 2.5, 0.5),   # interval 98 sigma below the mean

        ],
    )
    def test_deep_tails_match_scipy(self, mu, lo, hi, x):
        ours = truncated_normal_cdf(x, mu, 1.0, lo, hi)
        ref = oracles.truncnorm_cdf(x, mu, 1.0, lo, hi)
        assert ours == pytest.approx(ref, rel=1e-9, abs=1e-15)

    @pytest.mark.parametrize("mu", [-1e5, -700.0, 50.0, 700.0, 1e5])
    def test_far_location_never_overflows(self, mu):
        # Root finding over the location pushes mu hundreds of sigma
        # past a fixed interval; the CDF must stay finite and monotone.
        lo_val = truncated_normal_cdf(0.21, mu, 1.0, 0.2, 2.5)
        hi_val = truncated_normal_cdf(2.49, mu, 1.0, 0.2, 2.5)
        for v in (lo_val, hi_val):
            assert np.isfinite(v) and 0.0 <= v <= 1.0
        assert lo_val <= hi_val

    def test_boundary_values(self):
        assert truncated_normal_cdf(-1.0, 0.0, 1.0, -1.0, 1.0) == 0.0
        assert truncated_normal_cdf(1.0, 0.0, 1.0, -1.0, 1.0) == 1.0
        assert truncated_normal_cdf(-5.0, 0.0, 1.0, -1.0, 1.0) == 0.0
        assert truncated_normal_cdf(5.0, 0.0, 1.0, -1.0, 1.0) == 1.0

    def test_empty_interval_degrades_to_step(self):
        # A moving bound can invert the interval mid-root-find; the CDF
        # must answer directionally instead of raising.
        assert truncated_normal_cdf(0.4, 0.0, 1.0, 0.5, -0.5) == 0.0
        assert truncated_normal_cdf(0.6, 0.0, 1.0, 0.5, -0.5) == 1.0

    def test_bad_sigma(self):
        with pytest.raises(ValueError, match="sigma"):
            truncated_normal_cdf(0.0, 0.0, 0.0, -1.0, 1.0)

    def test_decreasing_in_location(self):
        values = [
            truncated_normal_cdf(0.3, mu, 1.0, -1.0, 2.0)
            for mu in np.linspace(-5, 5, 41)
        ]
        assert all(u >= v for u, v in zip(values, values[1:]))


class TestTruncationBounds:
    def test_independent_equal_variance_is_runner_up(self):
        lo, hi = truncation_bounds([3.0, 1.0, 2.0], np.eye(3), 0)
        assert lo == pytest.approx(2.0)
        assert hi == np.inf

    def test_single_coordinate_unbounded(self):
        lo, hi = truncation_bounds([1.7], [[0.3]], 0)
        assert (lo, hi) == (-np.inf, np.inf)

    def test_unit_slope_competitor_skipped(self):
        # Perfectly correlated equal-variance competitor moves one for
        # one with the winner, so it never constrains the location.
        vcov = np.array([[1.0, 1.0], [1.0, 1.0]])
        lo, hi = truncation_bounds([2.0, 1.0], vcov, 0)
        assert (lo, hi) == (-np.inf, np.inf)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_interval_is_exactly_the_winning_region(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 6))
        a = rng.normal(size=(p, p))
        vcov = a @ a.T + 0.1 * np.eye(p)
        eta = rng.normal(size=p)
        w = int(np.argmax(eta))
        lo, hi = truncation_bounds(eta, vcov, w)
        slope = vcov[:, w] / vcov[w, w]
        z = eta - slope * eta[w]

        def winner_at(t):
            e = z + slope * t
            return e[w] >= e.max() - 1e-9

        scale = float(np.sqrt(vcov[w, w]))
        assert lo - 1e-9 <= eta[w] <= hi + 1e-9
        for t in (lo + 1e-6 * scale, hi - 1e-6 * scale,
                  min(max(eta[w], lo), hi)):
            if np.isfinite(t):
                assert winner_at(t)
        if np.isfinite(lo):
            assert not winner_at(lo - 1e-3 * scale)
        if np.isfinite(hi):
            assert not winner_at(hi + 1e-3 * scale)

    def test_bad_variance(self):
        with pytest.raises(ValueError, match="variance"):
            truncation_bounds([1.0, 0.0], np.zeros((2, 2)), 0)


class TestConditionalMedianEstimate:
    @pytest.mark.parametrize(
        "mu,sigma,lo,hi",
        [
            (1.0, 1.0, 0.5, np.inf),
            (-0.3, 2.0, -1.0, 4.0),
            (0.0, 0.2, 0.1, 0.9),
            (3.0, 1.0, -np.inf, 3.5),
        ],
    )
    def test_inverts_the_median(self, mu, sigma, lo, hi):
        a, b = (lo - mu) / sigma, (hi - mu) / sigma
        x_med = stats.truncnorm.ppf(0.5, a, b, loc=mu, scale=sigma)
        est = conditional_median_estimate(x_med, sigma**2, (lo, hi))
        assert est == pytest.approx(mu, abs=1e-6 * sigma)

    def test_median_unbiased_under_repeated_sampling(self):
        mu, sigma, lo, hi = 1.0, 1.0, 0.2, 2.5
        a, b = (lo - mu) / sigma, (hi - mu) / sigma
        # Winsorize the sampling uniforms: a draw within ~1e-5 sigma of
        # a bound has its root thousands of sigma away, and clamping
        # cannot flip which side of mu the estimate lands on.
        u = np.random.default_rng(5).uniform(size=800)
        draws = stats.truncnorm.ppf(
            np.clip(u, 1e-4, 1 - 1e-4), a, b, loc=mu, scale=sigma
        )
        below = sum(
            conditional_median_estimate(x, sigma**2, (lo, hi)) <= mu
            for x in draws
        )
        # binomial(800, 1/2) three-sigma band
        assert abs(below / 800 - 0.5) <= 3 * np.sqrt(0.25 / 800)

    def test_increasing_in_observation(self):
        ests = [
            conditional_median_estimate(x, 1.0, (0.0, np.inf))
            for x in np.linspace(0.05, 4.0, 30)
        ]
        assert all(u < v for u, v in zip(ests, ests[1:]))

    def test_correction_vanishes_far_from_bound(self):
        est = conditional_median_estimate(8.0, 1.0, (0.0, np.inf))
        assert est == pytest.approx(8.0, abs=0.01)

    def test_photo_finish_root_is_reached(self):
        # Winning by 1e-3 sigma puts the root near -ln2/1e-3 = -693
        # sigma; the bracket must widen geometrically to reach it.
        x = 1e-3
        est = conditional_median_estimate(x, 1.0, (0.0, np.inf))
        assert -700.0 < est < -680.0
        assert truncated_normal_cdf(x, est, 1.0, 0.0, np.inf) == \
            pytest.approx(0.5, abs=1e-5)

    def test_unreachable_root_raises(self):
        with pytest.raises(ConvergenceError, match="not bracketed"):
            conditional_median_estimate(1e-9, 1.0, (0.0, np.inf))

    def test_doubly_infinite_bounds_pass_through(self):
        assert conditional_median_estimate(
            1.23, 4.0, (-np.inf, np.inf)
        ) == 1.23

    def test_observation_outside_bounds_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            conditional_median_estimate(-0.5, 1.0, (0.0, np.inf))

    def test_bad_variance(self):
        with pytest.raises(ValueError, match="variance"):
            conditional_median_estimate(1.0, 0.0, (0.0, np.inf))


class TestProjectionQuantile:
    def test_single_coordinate_exact(self):
        assert projection_quantile([[2.0]], 0.005) == pytest.approx(
            stats.norm.ppf(1 - 0.005 / 2), abs=1e-12
        )

    def test_independent_exact(self):
        beta = 0.005
        value = projection_quantile(np.diag([1.0, 4.0, 0.25]), beta)
        expected = stats.norm.ppf((1 + (1 - beta) ** (1 / 3)) / 2)
        assert value == pytest.approx(expected, abs=1e-12)

    def test_correlated_is_deterministic_and_scale_free(self):
        vcov = np.array([[1.0, 0.5], [0.5, 2.0]])
        c1 = projection_quantile(vcov, 0.005)
        assert projection_quantile(vcov, 0.005) == c1
        assert projection_quantile(9.0 * vcov, 0.005) == c1

    def test_correlated_between_extremes(self):
        beta = 0.005
        p = 4
        vcov = 0.4 * np.ones((p, p)) + 0.6 * np.eye(p)
        c = projection_quantile(vcov, beta)
        lo = stats.norm.ppf(1 - beta / 2)  # perfect correlation
        hi = stats.norm.ppf((1 + (1 - beta) ** (1 / p)) / 2)  # independence
        assert lo - 0.05 < c < hi + 0.05

    def test_near_perfect_correlation_approaches_single(self):
        vcov = 0.999 * np.ones((3, 3)) + 0.001 * np.eye(3)
        c = projection_quantile(vcov, 0.005)
        assert c == pytest.approx(stats.norm.ppf(1 - 0.0025), abs=0.1)


class TestHybrid:
    @pytest.mark.parametrize("alpha,beta", [(0.05, 0.005), (0.10, 0.02)])
    def test_single_coordinate_recovers_standard_interval(self, alpha, beta):
        # With one coordinate there is no selection: the projection band
        # at level 1-beta and the readjusted tail (alpha-beta)/(2(1-beta))
        # cancel exactly, leaving naive +- z_{1-alpha/2} sigma.
        sigma = 0.7
        res = hybrid([2.0], [[sigma**2]], alpha, beta)
        z = stats.norm.ppf(1 - alpha / 2)
        assert res.adjusted_point == pytest.approx(2.0, abs=1e-6 * sigma)
        assert res.hybrid_ci[0] == pytest.approx(2.0 - z * sigma, abs=1e-5)
        assert res.hybrid_ci[1] == pytest.approx(2.0 + z * sigma, abs=1e-5)
        assert res.truncation == (-np.inf, np.inf)

    def test_fields_and_shrinkage(self):
        eta = [2.0, 1.8, 0.0]
        vcov = 0.04 * np.eye(3)
        res = hybrid(eta, vcov)
        assert isinstance(res, HybridEstimate)
        assert res.best_pool == 0
        assert res.naive == 2.0
        assert res.truncation[0] == pytest.approx(1.8)
        assert res.truncation[1] == np.inf
        # winning by one standard error drags the median estimate down
        assert res.adjusted_point < res.naive
        assert res.hybrid_ci[0] < res.adjusted_point < res.hybrid_ci[1]
        assert (res.alpha, res.beta) == (0.05, 0.005)

    def test_precomputed_projection_matches(self):
        eta = [1.0, 0.2, 0.4]
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 3))
        vcov = a @ a.T + 0.2 * np.eye(3)
        c = projection_quantile(vcov, 0.005)
        assert hybrid(eta, vcov, projection=c) == hybrid(eta, vcov)

    def test_explicit_winner_matches_default(self):
        eta = [0.5, 1.5]
        vcov = [[0.2, 0.05], [0.05, 0.3]]
        assert hybrid(eta, vcov, winner=1) == hybrid(eta, vcov)

    def test_zero_variance_winner_passes_through(self):
        # saturated noiseless fit: the sigma -> 0 limit
        res = hybrid([3.0, 1.0], np.zeros((2, 2)))
        assert res.adjusted_point == 3.0
        assert res.hybrid_ci == (3.0, 3.0)
        assert res.truncation == (1.0, np.inf)
        assert res.projection == 0.0
        with pytest.raises(ValueError, match="not the argmax"):
            hybrid([3.0, 1.0], np.zeros((2, 2)), winner=1)

    def test_non_argmax_winner_rejected(self):
        with pytest.raises(ValueError, match="not the argmax"):
            hybrid([2.0, 0.0], np.eye(2), winner=1)

    @pytest.mark.parametrize("alpha,beta", [(0.05, 0.05), (0.05, 0.1),
                                            (0.0, 0.005), (1.0, 0.5)])
    def test_invalid_levels_rejected(self, alpha, beta):
        with pytest.raises(ValueError, match="alpha"):
            hybrid([1.0], [[1.0]], alpha, beta)

    def test_clear_winner_needs_no_adjustment(self):
        # Truncation bound 49 standard errors away: the interval is
        # exactly the projection band mu +- c sigma, so the CI has
        # half-width t with Phi(t) = Phi(-c) + (1-tail)(Phi(c)-Phi(-c)).
        eta = [5.0, 0.0, 0.1]
        vcov = 0.01 * np.eye(3)
        res = hybrid(eta, vcov)
        assert res.adjusted_point == pytest.approx(5.0, abs=1e-4)
        c = res.projection
        tail = (0.05 - 0.005) / (1 - 0.005) / 2
        band = stats.norm.cdf(c) - stats.norm.cdf(-c)
        t = stats.norm.ppf(stats.norm.cdf(-c) + (1 - tail) * band)
        assert res.hybrid_ci[0] == pytest.approx(5.0 - 0.1 * t, abs=1e-4)
        assert res.hybrid_ci[1] == pytest.approx(5.0 + 0.1 * t, abs=1e-4)
