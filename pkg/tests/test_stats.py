import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from depad.stats import (CorrelationCITest, Z_SENTINEL, distance_correlation, equal_frequency_bins,
                         fisher_z, fisher_z_test, mutual_information, partial_correlation,
                         partial_correlation_residuals, rank_sum_test)


def chain(n=5000, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = x + rng.normal(size=n)
    z = y + rng.normal(size=n)
    return np.column_stack([x, y, z])


def naive_dcor(x, y):
    """Direct double loop over pairs, kept separate from the vectorised code."""
    n = len(x)

    def centered(v):
        a = [[abs(v[p] - v[q]) for q in range(n)] for p in range(n)]
        row = [sum(r) / n for r in a]
        grand = sum(row) / n
        return [[a[p][q] - row[p] - row[q] + grand for q in range(n)] for p in range(n)]

    A, B = centered(list(x)), centered(list(y))
    mean = lambda F, G: sum(F[p][q] * G[p][q] for p in range(n) for q in range(n)) / n ** 2
    return math.sqrt(mean(A, B) / math.sqrt(mean(A, A) * mean(B, B)))


class TestPartialCorrelation:
    def test_identical_columns(self):
        x = np.random.default_rng(1).normal(size=50)
        assert partial_correlation(np.column_stack([x, x]), 0, 1) == pytest.approx(1.0, abs=1e-12)

    def test_independent(self):
        X = np.random.default_rng(2).normal(size=(5000, 2))
        assert abs(partial_correlation(X, 0, 1)) < 0.05

    def test_chain_screening(self):
        X = chain()
        assert partial_correlation(X, 0, 2) > 0.3
        assert abs(partial_correlation(X, 0, 2, [1])) < 0.05
        assert partial_correlation(X, 0, 2, [1]) == pytest.approx(partial_correlation_residuals(X, 0, 2, [1]), abs=1e-8)

    @given(st.integers(0, 10 ** 6), st.integers(10, 80), st.sets(st.integers(2, 5), max_size=3))
    def test_matches_residual_oracle(self, seed, n, cond):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 6)) @ rng.normal(size=(6, 6))
        cond = sorted(cond)
        assert partial_correlation(X, 0, 1, cond) == pytest.approx(
            partial_correlation_residuals(X, 0, 1, cond), abs=1e-8)

    @given(st.integers(0, 10 ** 6), st.integers(5, 60))
    def test_unconditional_is_pearson(self, seed, n):
        X = np.random.default_rng(seed).normal(size=(n, 2))
        assert partial_correlation(X, 0, 1) == pytest.approx(np.corrcoef(X.T)[0, 1], abs=1e-12)

    def test_constant_column_is_zero(self):
        X = np.column_stack([np.ones(20), np.arange(20.0)])
        assert partial_correlation(X, 0, 1) == 0.0
        r = fisher_z_test(X, 0, 1)
        assert r.degenerate and r.independent and r.p_value == 1.0


class TestFisherZ:
    def test_zero_correlation(self):
        r = fisher_z(0.0, 100, 0, 0.01)
        assert r.statistic == 0.0 and r.p_value == 1.0 and r.independent

    def test_hand_evaluated(self):
        r = fisher_z(0.3, 100, 1, 0.01)
        z = 0.5 * math.log(1.3 / 0.7) * math.sqrt(96)
        assert r.statistic == pytest.approx(z, rel=1e-12)
        assert r.statistic == pytest.approx(3.033, abs=5e-4)
        assert r.p_value == pytest.approx(2 * norm.sf(z), rel=1e-9)
        assert r.p_value == pytest.approx(0.0024, abs=5e-5)
        assert not r.independent

    def test_perfect_dependence(self):
        x = np.arange(30.0)
        r = fisher_z_test(np.column_stack([x, x]), 0, 1)
        assert r.p_value == 0.0 and not r.independent
        assert r.statistic == Z_SENTINEL and math.isfinite(r.statistic)

    def test_too_few_degrees_of_freedom(self):
        with pytest.raises(ValueError):
            fisher_z(0.1, 5, 2)

    @given(st.integers(0, 10 ** 6), st.sets(st.integers(2, 4), max_size=2))
    def test_symmetric_and_consistent(self, seed, cond):
        X = np.random.default_rng(seed).normal(size=(40, 5))
        X[:, 1] += 0.3 * X[:, 0]
        cond = sorted(cond)
        a, b = fisher_z_test(X, 0, 1, cond), fisher_z_test(X, 1, 0, cond)
        assert (a.statistic, a.p_value, a.independent) == (b.statistic, b.p_value, b.independent)
        assert 0.0 <= a.p_value <= 1.0
        assert a.independent == (a.p_value > a.alpha)

    def test_cached_matrix_agrees(self):
        X = chain(500)
        test = CorrelationCITest(X, 0.01)
        assert test(0, 2, [1]).p_value == pytest.approx(fisher_z_test(X, 0, 2, [1]).p_value, abs=1e-10)
        assert test.can_test(496) and not test.can_test(497)


class TestMutualInformation:
    def test_independent(self):
        X = np.random.default_rng(3).uniform(size=(5000, 2))
        assert mutual_information(X, 0, 1, bins=10) < 0.02

    def test_default_bins_carry_plug_in_bias(self):
        # ceil(sqrt(5000)) = 71 bins; first-order plug-in bias is (b - 1)^2 / (2n) = 0.49
        X = np.random.default_rng(3).uniform(size=(5000, 2))
        assert mutual_information(X, 0, 1) > 0.3

    @pytest.mark.parametrize("bins", [2, 5, 10])
    def test_identity_gives_log_bins(self, bins):
        x = np.random.default_rng(4).normal(size=100 * bins)
        assert mutual_information(np.column_stack([x, x]), 0, 1, bins) == pytest.approx(math.log(bins), rel=1e-12)

    def test_constant(self):
        X = np.column_stack([np.zeros(30), np.arange(30.0)])
        assert mutual_information(X, 0, 1) == 0.0

    def test_rejects_one_bin(self):
        with pytest.raises(ValueError):
            mutual_information(np.random.default_rng(0).normal(size=(10, 2)), 0, 1, 1)

    def test_equal_frequency(self):
        codes = equal_frequency_bins(np.arange(12.0)[::-1], 4)
        assert np.bincount(codes).tolist() == [3, 3, 3, 3]
        assert codes[0] == 3 and codes[-1] == 0

    @given(st.integers(0, 10 ** 6))
    def test_plug_in_oracle(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(60, 2))
        X[:, 1] += X[:, 0]
        bx, by = equal_frequency_bins(X[:, 0], 5), equal_frequency_bins(X[:, 1], 5)
        n = len(bx)
        mi = 0.0
        for u, v in set(zip(bx, by)):
            pj = np.sum((bx == u) & (by == v)) / n
            mi += pj * math.log(pj / (np.mean(bx == u) * np.mean(by == v)))
        assert mutual_information(X, 0, 1, 5) == pytest.approx(mi, abs=1e-12)


class TestDistanceCorrelation:
    def test_identical(self):
        x = np.random.default_rng(5).normal(size=40)
        assert distance_correlation(np.column_stack([x, x]), 0, 1) == pytest.approx(1.0, abs=1e-12)

    def test_independent(self):
        X = np.random.default_rng(6).normal(size=(2000, 2))
        assert distance_correlation(X, 0, 1) < 0.08

    def test_nonlinear(self):
        x = np.linspace(-1, 1, 401)
        X = np.column_stack([x, x ** 2])
        assert abs(np.corrcoef(X.T)[0, 1]) < 1e-10
        assert distance_correlation(X, 0, 1) > 0.3

    def test_constant_and_small(self):
        assert distance_correlation(np.column_stack([np.ones(8), np.arange(8.0)]), 0, 1) == 0.0
        with pytest.raises(ValueError):
            distance_correlation(np.ones((3, 2)), 0, 1)

    @given(st.integers(0, 10 ** 6))
    def test_naive_oracle(self, seed):
        X = np.random.default_rng(seed).normal(size=(12, 2))
        assert distance_correlation(X, 0, 1) == pytest.approx(naive_dcor(X[:, 0], X[:, 1]), abs=1e-10)

    @given(st.integers(0, 10 ** 6), st.floats(-50, 50), st.floats(0.01, 100))
    def test_translation_and_scale_invariance(self, seed, shift, scale):
        X = np.random.default_rng(seed).normal(size=(30, 2))
        Y = X.copy()
        Y[:, 1] = Y[:, 1] * scale + shift
        assert distance_correlation(Y, 0, 1) == pytest.approx(distance_correlation(X, 0, 1), abs=1e-9)


def exact_p(a, b, alternative):
    """Exhaustive permutation oracle on the U statistic of a."""
    pooled = list(a) + list(b)
    N, na = len(pooled), len(a)
    ranks = {}
    for v in set(pooled):
        below = sum(x < v for x in pooled)
        ties = sum(x == v for x in pooled)
        ranks[v] = below + (ties + 1) / 2
    r = [ranks[v] for v in pooled]
    u_of = lambda idx: sum(r[k] for k in idx) - na * (na + 1) / 2
    u = u_of(range(na))
    mu = na * len(b) / 2
    us = [u_of(c) for c in itertools.combinations(range(N), na)]
    if alternative == "less":
        hits = [x <= u + 1e-9 for x in us]
    elif alternative == "greater":
        hits = [x >= u - 1e-9 for x in us]
    else:
        hits = [abs(x - mu) >= abs(u - mu) - 1e-9 for x in us]
    return sum(hits) / len(us)


class TestRankSum:
    def test_separated_samples(self):
        r = rank_sum_test([1, 2, 3], [4, 5, 6], "less")
        assert r.p_value == pytest.approx(1 / math.comb(6, 3)) and r.p_value == pytest.approx(0.05)
        assert r.statistic == 0.0

    def test_identical_samples(self):
        assert rank_sum_test([3, 1, 2, 5], [3, 1, 2, 5]).p_value == 1.0
        assert rank_sum_test(np.arange(20.0), np.arange(20.0)).p_value == 1.0

    def test_null_p_values_are_spread(self):
        rng = np.random.default_rng(7)
        ps = [rank_sum_test(rng.normal(size=20), rng.normal(size=20)).p_value for _ in range(200)]
        assert 0.3 <= float(np.median(ps)) <= 0.7

    def test_validation(self):
        with pytest.raises(ValueError):
            rank_sum_test([], [1.0])
        with pytest.raises(ValueError):
            rank_sum_test([1.0], [2.0], "bigger")

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=6), st.lists(st.integers(0, 6), min_size=1, max_size=6),
           st.sampled_from(["less", "greater", "two-sided"]))
    def test_exact_matches_enumeration_oracle(self, a, b, alternative):
        assert rank_sum_test(a, b, alternative).p_value == pytest.approx(exact_p(a, b, alternative), abs=1e-12)

    @given(st.lists(st.floats(-5, 5), min_size=6, max_size=12, unique=True), st.integers(3, 6),
           st.sampled_from(["less", "greater", "two-sided"]))
    def test_normal_approximation_close_to_exact(self, pooled, na, alternative):
        a, b = pooled[:na], pooled[na:]
        if len(b) < 3:
            return
        exact = rank_sum_test(a, b, alternative, method="exact").p_value
        approx = rank_sum_test(a, b, alternative, method="normal").p_value
        assert abs(exact - approx) <= 0.05

    @pytest.mark.xfail(strict=True, reason="a single value against two cannot be approximated to 0.05; see ledger")
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=1, max_size=6),
           st.sampled_from(["less", "greater", "two-sided"]))
    def test_normal_approximation_close_to_exact_any_size(self, a, b, alternative):
        exact = rank_sum_test(a, b, alternative, method="exact").p_value
        approx = rank_sum_test(a, b, alternative, method="normal").p_value
        assert 0.0 <= approx <= 1.0
        assert abs(exact - approx) <= 0.05
