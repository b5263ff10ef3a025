"""Puffer transform, its carried moments, and the design diagnostics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from tva import (
    FactorialDesign, InvalidDesignError, SingularDesignError,
    irrepresentability_l1, limiting_gram, marginal_matrix,
    min_singular_closed_form, puffer, puffer_row_normalized,
    relation_matrix,
)

design_strategy = st.lists(
    st.integers(min_value=2, max_value=5), min_size=1, max_size=3
).filter(lambda d: int(np.prod(d)) <= 80).map(
    lambda d: FactorialDesign(tuple(d))
)


def balanced_assignment(design, n):
    k = design.n_policies
    reps = np.full(k, n // k)
    reps[: n % k] += 1
    return np.repeat(np.arange(k), reps)


class TestPuffer:
    def test_orthonormalizes_columns(self, design_33, rng):
        x = marginal_matrix(design_33, balanced_assignment(design_33, 300))
        y = rng.normal(size=300)
        pd = puffer(x, y)
        assert np.allclose(pd.FX.T @ pd.FX, np.eye(9), atol=1e-10)

    def test_transformed_moments_are_ols(self, design_33, rng):
        # (FX)'Fy equals the OLS coefficients of the original system.
        x = marginal_matrix(design_33, balanced_assignment(design_33, 300))
        y = rng.normal(size=300) + x @ rng.normal(size=9)
        pd = puffer(x, y)
        assert np.allclose(pd.FX.T @ pd.Fy, oracles.ols(x, y), atol=1e-8)

    def test_fy_lies_in_design_span(self, design_33, rng):
        # The transformed outcome has zero residual on FX by
        # construction, which is why the original moments are carried.
        x = marginal_matrix(design_33, balanced_assignment(design_33, 300))
        y = rng.normal(size=300)
        pd = puffer(x, y)
        resid = pd.Fy - pd.FX @ (pd.FX.T @ pd.Fy)
        assert np.allclose(resid, 0.0, atol=1e-10)

    def test_carried_moments_match_original(self, rng):
        x = rng.normal(size=(60, 5))
        y = rng.normal(size=60)
        pd = puffer(x, y)
        assert np.allclose(pd.gram(), x.T @ x, atol=1e-9)
        assert np.allclose(pd.crossprod(), x.T @ y, atol=1e-9)
        assert pd.yty == pytest.approx(float(y @ y))
        assert pd.n == 60 and pd.n_columns == 5

    def test_arrays_frozen(self, rng):
        pd = puffer(rng.normal(size=(30, 3)), rng.normal(size=30))
        with pytest.raises(ValueError):
            pd.FX[0, 0] = 1.0

    def test_empty_cell_raises_named_error(self, design_32, rng):
        # Nobody assigned the all-max cell: its marginal column becomes
        # linearly dependent and the error names columns involved.
        assign = np.array([0, 1, 2, 3, 4] * 20)
        x = marginal_matrix(design_32, assign)
        with pytest.raises(SingularDesignError, match=r"indices \[.*5.*\]"):
            puffer(x, rng.normal(size=assign.size))

    def test_more_columns_than_rows_rejected(self, rng):
        with pytest.raises(SingularDesignError):
            puffer(rng.normal(size=(4, 6)), rng.normal(size=4))

    def test_length_mismatch_rejected(self, rng):
        with pytest.raises(SingularDesignError):
            puffer(rng.normal(size=(30, 3)), rng.normal(size=29))


class TestRowNormalized:
    def test_rescales_rows_jointly(self, rng):
        x = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        pd = puffer(x, y)
        rn = puffer_row_normalized(pd)
        norms = pd.row_norms()
        assert np.allclose(rn.FX * norms[:, None], pd.FX, atol=1e-12)
        assert np.allclose(rn.Fy * norms, pd.Fy, atol=1e-12)
        assert rn.row_normalized and not pd.row_normalized

    def test_original_moments_survive(self, rng):
        x = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        rn = puffer_row_normalized(puffer(x, y))
        assert np.allclose(rn.gram(), x.T @ x, atol=1e-9)
        assert np.allclose(rn.crossprod(), x.T @ y, atol=1e-9)


class TestIrrepresentability:
    def test_dominance_design_violates_condition(self, design_33):
        # The all-max column is nearly reproducible from the others:
        # the norm exceeds the LASSO threshold of 1.
        x = relation_matrix(design_33)[balanced_assignment(design_33, 900)]
        assert irrepresentability_l1(x, 8) > 1.0
        assert irrepresentability_l1(x, 8, standardized=True) > 1.0

    def test_orthogonal_design_scores_zero(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(40, 5)))
        assert irrepresentability_l1(q, 2) == pytest.approx(0.0, abs=1e-10)

    def test_intercept_excluded_from_sum(self, rng):
        # Shifting a column by a constant changes only the intercept
        # loading, which the norm must not count.
        x = np.column_stack([np.ones(80), rng.normal(size=(80, 3))])
        before = irrepresentability_l1(x, 3)
        x2 = x.copy()
        x2[:, 1] += 7.5
        assert irrepresentability_l1(x2, 3) == pytest.approx(before, abs=1e-8)

    def test_matches_direct_regression(self, design_32, rng):
        x = relation_matrix(design_32)[
            rng.integers(0, 6, size=500)
        ]
        coef = oracles.ols(np.delete(x, 5, axis=1), x[:, 5])
        assert irrepresentability_l1(x, 5) == pytest.approx(
            np.abs(coef[1:]).sum(), abs=1e-9
        )

    def test_bad_target_rejected(self, rng):
        with pytest.raises(InvalidDesignError):
            irrepresentability_l1(rng.normal(size=(10, 3)), 3)


class TestLimitingGram:
    @given(design_strategy)
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force(self, design):
        assert np.allclose(
            limiting_gram(design), oracles.limiting_gram(design.dosages),
            atol=1e-12,
        )

    def test_sample_gram_converges(self, design_32):
        # Balanced cells reproduce the limiting Gram exactly.
        w = relation_matrix(design_32, intercept=False)
        x = w[balanced_assignment(design_32, 600)]
        assert np.allclose(x.T @ x / 600, limiting_gram(design_32), atol=1e-12)

    def test_control_block_is_one_over_k(self, design_33):
        assert limiting_gram(design_33)[0, 0] == pytest.approx(1 / 9)


class TestClosedForm:
    def test_single_arm_value(self):
        # R=3, M=1: (12 sin^2(0.3 pi))^(-1/2).
        expected = (12 * math.sin(0.3 * math.pi) ** 2) ** -0.5
        assert min_singular_closed_form(3, 1) == pytest.approx(
            expected, abs=1e-12
        )

    @pytest.mark.parametrize("r", [3, 4, 5])
    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_matches_numeric_eigenvalue(self, r, m):
        xi = min_singular_closed_form(r, m)
        gram = oracles.limiting_gram((r,) * m)
        lam_min = float(np.linalg.eigvalsh(gram)[0])
        assert xi**2 == pytest.approx(lam_min, abs=1e-6)

    def test_powers_multiply_across_arms(self):
        one = min_singular_closed_form(4, 1)
        assert min_singular_closed_form(4, 3) == pytest.approx(
            one**3, rel=1e-12
        )

    def test_rejects_degenerate_inputs(self):
        with pytest.raises(InvalidDesignError):
            min_singular_closed_form(1, 2)
        with pytest.raises(InvalidDesignError):
            min_singular_closed_form(3, 0)
