"""Design enumeration, the dominance relation, and the alpha/beta maps."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from tva import (
    FactorialDesign, InvalidDesignError, PolicyLattice, alpha_to_beta,
    beta_to_alpha, enumerate_policies, marginal_matrix, policy_index,
    profile_of, relation_matrix, unique_policy_matrix,
)

# Bounded random designs for property tests: K <= 256 cells.
design_strategy = st.lists(
    st.integers(min_value=2, max_value=6), min_size=1, max_size=4
).filter(lambda d: int(np.prod(d)) <= 256).map(
    lambda d: FactorialDesign(tuple(d))
)


class TestFactorialDesign:
    def test_counts(self):
        d = FactorialDesign((5, 5, 3))
        assert d.arm_count == 3
        assert d.n_policies == 75

    def test_single_arm(self):
        assert FactorialDesign((4,)).n_policies == 4

    @pytest.mark.parametrize("dosages", [(), (1,), (3, 1), (0, 2), (2, -1)])
    def test_rejects_degenerate(self, dosages):
        with pytest.raises(InvalidDesignError):
            FactorialDesign(dosages)

    def test_coerces_to_int_tuple(self):
        d = FactorialDesign([np.int64(3), 2.0])
        assert d.dosages == (3, 2)
        assert isinstance(d.dosages[0], int)


class TestEnumeration:
    def test_canonical_order_32(self, design_32):
        # Arm 1 is the slowest digit; control first, all-max last.
        pol = enumerate_policies(design_32)
        expected = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]
        assert [tuple(p) for p in pol] == expected

    @given(design_strategy)
    @settings(max_examples=50, deadline=None)
    def test_matches_oracle_order(self, design):
        pol = enumerate_policies(design)
        assert [tuple(p) for p in pol] == \
            oracles.enumerate_policy_tuples(design.dosages)

    @given(design_strategy)
    @settings(max_examples=50, deadline=None)
    def test_policy_index_round_trip(self, design):
        pol = enumerate_policies(design)
        idx = policy_index(design, pol)
        assert np.array_equal(idx, np.arange(design.n_policies))
        assert policy_index(design, pol[design.n_policies - 1]) == \
            design.n_policies - 1

    def test_policy_index_rejects_out_of_range(self, design_32):
        with pytest.raises(InvalidDesignError):
            policy_index(design_32, [3, 0])
        with pytest.raises(InvalidDesignError):
            policy_index(design_32, [0, -1])

    def test_profile_is_one_based(self):
        assert profile_of([1, 0, 2]) == frozenset({1, 3})
        assert profile_of([0, 0]) == frozenset()


class TestRelationMatrix:
    def test_strict_matches_oracle(self, design_33):
        w = relation_matrix(design_33, intercept=False)
        assert np.array_equal(w, oracles.strict_relation(design_33.dosages))

    def test_intercept_only_changes_control_column(self, design_33):
        w_strict = relation_matrix(design_33, intercept=False)
        w = relation_matrix(design_33)
        assert np.array_equal(w[:, 1:], w_strict[:, 1:])
        assert np.array_equal(w[:, 0], np.ones(design_33.n_policies))
        assert np.array_equal(w_strict[:, 0],
                              np.eye(design_33.n_policies)[:, 0])

    def test_unit_lower_triangular(self, design_553):
        w = relation_matrix(design_553, intercept=False)
        assert np.array_equal(np.diag(w), np.ones(design_553.n_policies))
        assert np.allclose(np.triu(w, k=1), 0.0)

    @given(design_strategy)
    @settings(max_examples=30, deadline=None)
    def test_row_sums_count_dominated_variants(self, design):
        # A policy dominates prod_{active m} r_m same-profile cells; the
        # intercept adds the control column to every treated row.
        pol = enumerate_policies(design)
        strict = relation_matrix(design, intercept=False).sum(axis=1)
        inter = relation_matrix(design).sum(axis=1)
        for k in range(design.n_policies):
            expected = np.prod(pol[k][pol[k] > 0]) if pol[k].any() else 1
            assert strict[k] == expected
            assert inter[k] == expected + (1 if pol[k].any() else 0)

    @given(design_strategy)
    @settings(max_examples=30, deadline=None)
    def test_column_means_close_form(self, design):
        # Balanced cells: mean of column l is prod(R_m - r_m) / K.
        w = relation_matrix(design)
        pol = enumerate_policies(design)
        means = w.mean(axis=0)
        assert means[0] == 1.0
        for l in range(1, design.n_policies):
            assert means[l] == pytest.approx(
                oracles.column_mean(design.dosages, tuple(pol[l])), abs=1e-12
            )


class TestMarginalMatrix:
    def test_factors_through_cell_indicators(self, design_33, rng):
        # X = T W: the unit-level design is the cell indicator matrix
        # times the relation matrix.
        assign = rng.integers(0, design_33.n_policies, size=200)
        x = marginal_matrix(design_33, assign)
        t = unique_policy_matrix(design_33, assign)
        w = relation_matrix(design_33)
        assert np.array_equal(x, t @ w)

    def test_accepts_intensity_rows(self, design_32):
        by_index = marginal_matrix(design_32, [0, 3, 5])
        by_vector = marginal_matrix(design_32, [[0, 0], [1, 1], [2, 1]])
        assert np.array_equal(by_index, by_vector)

    def test_rejects_bad_index(self, design_32):
        with pytest.raises(InvalidDesignError):
            marginal_matrix(design_32, [6])


class TestAlphaBetaMaps:
    def test_single_marginal_fills_dominating_cells(self, design_33):
        # One marginal effect of 2 at [1,1] lifts all four cells with
        # both arms on and leaves every other cell untouched.
        alpha = np.zeros(9)
        alpha[policy_index(design_33, [1, 1])] = 2.0
        beta = alpha_to_beta(design_33, alpha)
        for cell in ([1, 1], [1, 2], [2, 1], [2, 2]):
            assert beta[policy_index(design_33, cell)] == 2.0
        for cell in ([0, 0], [0, 1], [0, 2], [1, 0], [2, 0]):
            assert beta[policy_index(design_33, cell)] == 0.0

    def test_inverse_on_profile_example(self, design_33):
        # beta of (2, 2, 2, 5) over the both-on cells [1,1], [2,1],
        # [1,2], [2,2] inverts to marginals (2, 0, 0, 3).
        beta = np.zeros(9)
        for cell, value in ((([1, 1]), 2.0), (([2, 1]), 2.0),
                            (([1, 2]), 2.0), (([2, 2]), 5.0)):
            beta[policy_index(design_33, cell)] = value
        alpha = beta_to_alpha(design_33, beta)
        assert alpha[policy_index(design_33, [1, 1])] == pytest.approx(2.0)
        assert alpha[policy_index(design_33, [1, 2])] == pytest.approx(0.0)
        assert alpha[policy_index(design_33, [2, 1])] == pytest.approx(0.0)
        assert alpha[policy_index(design_33, [2, 2])] == pytest.approx(3.0)

    def test_parallelogram_identity(self, design_33, rng):
        # The top-corner marginal is the double difference of the
        # both-on cell effects.
        beta = np.zeros(9)
        cells = {c: policy_index(design_33, c)
                 for c in ((1, 1), (1, 2), (2, 1), (2, 2))}
        values = {c: rng.normal() for c in cells}
        for c, i in cells.items():
            beta[i] = values[c]
        alpha = beta_to_alpha(design_33, beta)
        expected = (values[(2, 2)] - values[(2, 1)]) \
            - (values[(1, 2)] - values[(1, 1)])
        assert alpha[cells[(2, 2)]] == pytest.approx(expected, abs=1e-12)

    def test_asymmetric_hand_example(self, design_32):
        # Control passthrough plus one interaction marginal at [1,1].
        alpha = np.array([2.0, 0.0, 0.0, 3.0, 0.0, 0.0])
        beta = alpha_to_beta(design_32, alpha)
        assert np.array_equal(beta, [2.0, 0.0, 0.0, 3.0, 0.0, 3.0])

    @given(design_strategy, st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_and_oracle(self, design, seed):
        rng = np.random.default_rng(seed)
        alpha = rng.integers(-9, 10, size=design.n_policies).astype(float)
        beta = alpha_to_beta(design, alpha)
        assert np.array_equal(
            beta, oracles.alpha_to_beta(design.dosages, alpha)
        )
        back = beta_to_alpha(design, beta)
        assert np.allclose(back, alpha, atol=1e-12)
        # Integer alphas survive the round trip exactly.
        assert np.array_equal(np.round(back), alpha)
        assert np.allclose(
            oracles.beta_to_alpha(design.dosages, beta), alpha, atol=1e-9
        )


class TestPolicyLattice:
    def test_views_are_consistent(self, design_32):
        lat = PolicyLattice(design_32)
        assert lat.policies.shape == (6, 2)
        assert lat.profiles[0] == frozenset()
        assert lat.profiles[3] == frozenset({1, 2})
        assert np.array_equal(
            lat.relation, relation_matrix(design_32, intercept=False)
        )

    def test_dominance_ignores_profiles(self, design_32):
        lat = PolicyLattice(design_32)
        # (1,1) dominates (1,0) even though their profiles differ.
        assert lat.dominance[3, 2]
        assert not lat.relation[3, 2]

    def test_hasse_edges_32(self, design_32):
        # Covers are one-step moves within a profile: (1,0)->(2,0) and
        # (1,1)->(2,1).  Profile changes are never covers.
        assert set(PolicyLattice(design_32).hasse_edges) == {(2, 4), (3, 5)}

    def test_hasse_edges_transitive_reduction(self, design_33):
        lat = PolicyLattice(design_33)
        rel = lat.relation
        for lo, hi in lat.hasse_edges:
            assert rel[hi, lo] == 1.0 and lo != hi
            between = [
                j for j in range(design_33.n_policies)
                if j not in (lo, hi) and rel[j, lo] == 1.0 and rel[hi, j] == 1.0
            ]
            assert between == []
