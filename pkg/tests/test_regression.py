import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depad.regression import (BaggedModel, ConstantModel, LinearModel, Predictor, RegressionTree, TreeParams,
                              best_split, default_lambda_grid, fit_bagged, fit_cart, fit_linear, fit_predictor,
                              lambda_max, model_from_dict, predict, soft_threshold)


def brute_force_split(X, y, min_bucket):
    """Every midpoint of every predictor, scored by SSE reduction with plain loops."""
    sse = lambda v: float(np.sum((v - v.mean()) ** 2)) if len(v) else 0.0
    base = sse(y)
    best = None
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f]))
        for lo, hi in zip(values, values[1:]):
            thr = (lo + hi) / 2
            left = X[:, f] <= thr
            if left.sum() < min_bucket or (~left).sum() < min_bucket:
                continue
            gain = base - sse(y[left]) - sse(y[~left])
            if best is None or gain > best[2] + 1e-9 * max(1.0, abs(best[2])):
                best = (f, thr, gain)
    return best


def stump_data(n=40):
    x = np.linspace(-1, 1, n)
    return x[:, None], (x >= 0).astype(float)


class TestCart:
    def test_step_function(self):
        X, y = stump_data()
        tree = fit_cart(X, y, TreeParams(min_bucket=7))
        assert tree.depth() == 1
        assert np.array_equal(tree.predict(X), y)

    @given(st.integers(0, 10 ** 6), st.integers(1, 3))
    def test_split_matches_exhaustive_oracle(self, seed, p):
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 6, size=(10, p)).astype(float)
        y = rng.normal(size=10)
        got, want = best_split(X, y, 1), brute_force_split(X, y, 1)
        if want is None:
            assert got is None
            return
        assert got[2] == pytest.approx(want[2], rel=1e-9, abs=1e-12)
        assert (got[0], got[1]) == (want[0], want[1])

    def test_below_min_split_is_a_root_leaf(self):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(19, 2)), rng.normal(size=19)
        tree = fit_cart(X, y)
        assert tree.n_nodes == 1
        assert tree.predict(X[:3]) == pytest.approx([y.mean()] * 3)

    def test_no_predictors(self):
        y = np.arange(30.0)
        tree = fit_cart(np.zeros((30, 0)), y)
        assert tree.n_nodes == 1 and tree.value[0] == pytest.approx(y.mean())

    def test_cp_blocks_weak_splits(self):
        X, y = stump_data(60)
        y = y + 1e-3 * np.sin(np.arange(60))
        loose = fit_cart(X, y, TreeParams(cp=0.0, min_split=2, min_bucket=1))
        strict = fit_cart(X, y, TreeParams(cp=0.003))
        assert strict.n_nodes == 3 and loose.n_nodes > 3

    @settings(max_examples=30)
    @given(st.integers(0, 10 ** 6), st.integers(20, 120))
    def test_leaf_structure(self, seed, n):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 3))
        y = X[:, 0] ** 2 + rng.normal(size=n)
        params = TreeParams()
        tree = fit_cart(X, y, params)
        leaves = tree.apply(X)
        for leaf in np.unique(leaves):
            cohort = y[leaves == leaf]
            assert tree.count[leaf] == len(cohort) >= params.min_bucket
            assert tree.value[leaf] == pytest.approx(cohort.mean(), abs=1e-12)
        for k in range(tree.n_nodes):
            if not tree.is_leaf(k):
                assert tree.count[k] >= params.min_split
        assert np.all(np.isfinite(tree.predict(rng.normal(size=(50, 3)) * 100)))

    def test_known_leaf_region(self):
        X, y = stump_data()
        tree = fit_cart(X, y)
        assert tree.predict(np.array([[0.9], [-0.9]])).tolist() == [1.0, 0.0]

    def test_json_round_trip(self):
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(80, 2)), rng.normal(size=80)
        tree = fit_cart(X, y)
        back = RegressionTree.from_dict(json.loads(json.dumps(tree.to_dict())))
        assert np.array_equal(back.predict(X), tree.predict(X))


class TestBagging:
    def test_single_tree_without_bootstrap(self):
        rng = np.random.default_rng(2)
        X, y = rng.normal(size=(60, 2)), rng.normal(size=60)
        bag = fit_bagged(X, y, n_trees=1, bootstrap=False)
        assert np.array_equal(bag.predict(X), fit_cart(X, y).predict(X))

    @pytest.mark.parametrize("aggregate", ["mean", "median"])
    def test_constant_target(self, aggregate):
        X = np.random.default_rng(3).normal(size=(50, 2))
        bag = fit_bagged(X, np.full(50, 4.5), n_trees=7, aggregate=aggregate)
        assert np.all(bag.predict(X) == 4.5)

    def test_median_resists_outliers(self):
        gaps = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            n = 200
            x = rng.uniform(-2, 2, size=(n, 1))
            y = np.sin(2 * x[:, 0]) + 0.1 * rng.normal(size=n)
            dirty = rng.choice(n, size=n // 20, replace=False)
            y[dirty] += 30.0
            clean = np.setdiff1d(np.arange(n), dirty)
            err = {}
            for agg in ("mean", "median"):
                model = fit_bagged(x, y, 25, agg, seed)
                err[agg] = np.mean(np.abs(model.predict(x[clean]) - y[clean]))
            gaps.append(err["mean"] - err["median"])
        assert np.mean(gaps) >= 0

    def test_median_of_tree_outputs(self):
        def leaf(v):
            return RegressionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                                  np.array([v]), np.array([1]))
        bag = BaggedModel([leaf(1.0), leaf(100.0), leaf(2.0)], "median")
        assert bag.predict(np.zeros((1, 1)))[0] == 2.0

    @given(st.integers(0, 10 ** 6), st.randoms())
    def test_tree_order_does_not_matter(self, seed, rnd):
        rng = np.random.default_rng(seed)
        X, y = rng.normal(size=(40, 2)), rng.normal(size=40) * 1e3
        bag = fit_bagged(X, y, n_trees=9, seed=seed)
        trees = list(bag.trees)
        rnd.shuffle(trees)
        for agg in ("mean", "median"):
            a = BaggedModel(bag.trees, agg).predict(X)
            b = BaggedModel(trees, agg).predict(X)
            assert np.array_equal(a, b)

    def test_threads_bit_identical(self):
        rng = np.random.default_rng(4)
        X, y = rng.normal(size=(150, 3)), rng.normal(size=150)
        one = fit_bagged(X, y, 12, seed=(5, 2), threads=1)
        many = fit_bagged(X, y, 12, seed=(5, 2), threads=6)
        assert json.dumps(one.to_dict()) == json.dumps(many.to_dict())

    def test_seeds_change_the_ensemble(self):
        rng = np.random.default_rng(5)
        X, y = rng.normal(size=(150, 2)), rng.normal(size=150)
        assert not np.array_equal(fit_bagged(X, y, 5, seed=1).predict(X), fit_bagged(X, y, 5, seed=2).predict(X))

    def test_validation(self):
        with pytest.raises(ValueError):
            fit_bagged(np.zeros((5, 1)), np.zeros(5), n_trees=0)
        with pytest.raises(ValueError):
            fit_bagged(np.zeros((5, 1)), np.zeros(5), aggregate="mode")


def subgradient_gap(X, y, model):
    """Largest violation of the lasso stationarity conditions, on the standardized scale."""
    mu, sd = X.mean(axis=0), X.std(axis=0)
    Z = (X - mu) / sd
    beta = model.coefficients * sd
    r = (y - y.mean()) - Z @ beta
    grad = Z.T @ r / len(y)
    lam = model.lam
    gap = 0.0
    for g, b in zip(grad, beta):
        if b != 0:
            gap = max(gap, abs(g - lam * np.sign(b)))
        else:
            gap = max(gap, abs(g) - lam)
    return gap


class TestLinear:
    def test_exact_line(self):
        x = np.linspace(-3, 5, 30)
        m = fit_linear(x[:, None], 2 * x + 1)
        assert m.coefficients[0] == pytest.approx(2.0, abs=1e-9)
        assert m.intercept == pytest.approx(1.0, abs=1e-9)

    @given(st.integers(0, 10 ** 6))
    def test_ols_matches_least_squares_and_orthogonality(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(50, 4)) * rng.uniform(0.1, 10, 4) + rng.normal(size=4)
        y = X @ rng.normal(size=4) + rng.normal(size=50)
        m = fit_linear(X, y)
        coef, *_ = np.linalg.lstsq(np.column_stack([np.ones(50), X]), y, rcond=None)
        assert m.intercept == pytest.approx(coef[0], abs=1e-7)
        assert m.coefficients == pytest.approx(coef[1:], abs=1e-7)
        resid = y - m.predict(X)
        Z = (X - X.mean(axis=0)) / X.std(axis=0)
        assert np.all(np.abs(Z.T @ resid) <= 1e-6)

    def test_ridge_zero_is_ols(self):
        rng = np.random.default_rng(6)
        X, y = rng.normal(size=(40, 3)), rng.normal(size=40)
        assert fit_linear(X, y, "RIDGE", lam=0.0).coefficients == pytest.approx(fit_linear(X, y).coefficients, abs=1e-7)

    def test_ridge_shrinks(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(40, 3))
        y = X @ [3.0, -2.0, 1.0] + rng.normal(size=40)
        norms = [np.linalg.norm(fit_linear(X, y, "RIDGE", lam=lam).coefficients) for lam in (0.0, 0.5, 5.0)]
        assert norms[0] > norms[1] > norms[2]

    def test_lasso_zero_at_lambda_max(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(60, 5)) * [1, 2, 3, 4, 5]
        y = X[:, 0] - X[:, 3] + rng.normal(size=60)
        Z = (X - X.mean(axis=0)) / X.std(axis=0)
        oracle = np.max(np.abs(Z.T @ (y - y.mean()))) / len(y)
        assert lambda_max(X, y) == pytest.approx(oracle, rel=1e-12)
        for lam in (oracle, 1.5 * oracle):
            m = fit_linear(X, y, "LASSO", lam=lam)
            assert np.all(m.coefficients == 0.0)
            assert m.intercept == pytest.approx(y.mean())
        assert np.any(fit_linear(X, y, "LASSO", lam=0.9 * oracle).coefficients != 0.0)

    @settings(max_examples=25)
    @given(st.integers(0, 10 ** 6), st.floats(1e-3, 0.9))
    def test_lasso_stationarity(self, seed, frac):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(80, 6))
        y = X @ rng.normal(size=6) + rng.normal(size=80)
        m = fit_linear(X, y, "LASSO", lam=frac * lambda_max(X, y))
        assert subgradient_gap(X, y, m) <= 1e-5

    def test_cross_validation_picks_from_grid(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(100, 4))
        y = X[:, 0] + 0.5 * rng.normal(size=100)
        grid = default_lambda_grid(X, y)
        assert len(grid) == 50
        assert grid.max() == pytest.approx(lambda_max(X, y)) and grid.min() == pytest.approx(1e-4 * grid.max())
        for kind in ("RIDGE", "LASSO"):
            m = fit_linear(X, y, kind)
            assert any(m.lam == pytest.approx(g) for g in grid)
            again = fit_linear(X, y, kind)
            assert m.lam == again.lam and np.array_equal(m.coefficients, again.coefficients)

    def test_collinear_predictors(self):
        x = np.random.default_rng(10).normal(size=30)
        X = np.column_stack([x, x, 1 - x])
        m = fit_linear(X, 3 * x)
        assert np.all(np.isfinite(m.coefficients))
        assert m.predict(X) == pytest.approx(3 * x, abs=1e-6)

    def test_empty_and_tiny(self):
        m = fit_linear(np.zeros((4, 0)), np.array([1.0, 2.0, 3.0, 10.0]))
        assert m.intercept == 4.0 and m.coefficients.shape == (0,)
        with pytest.raises(ValueError):
            fit_linear(np.zeros((1, 1)), np.zeros(1))

    def test_soft_threshold(self):
        assert [soft_threshold(z, 1.0) for z in (-3.0, -0.5, 0.0, 0.5, 3.0)] == [-2.0, 0.0, 0.0, 0.0, 2.0]


class TestPredictor:
    def test_fallback_predicts_training_median(self):
        X = np.column_stack([np.array([1.0, 2.0, 9.0, 4.0]), np.zeros(4)])
        p = fit_predictor(X, 0, (), "CART")
        assert p.is_fallback
        assert predict(p, [100.0, -5.0]) == 3.0

    @pytest.mark.parametrize("kind", ["CART", "MCART", "OLS", "RIDGE", "LASSO"])
    def test_round_trip(self, kind):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(80, 3))
        X[:, 0] = X[:, 1] - X[:, 2] + 0.1 * rng.normal(size=80)
        p = fit_predictor(X, 0, (1, 2), kind, seed=(3, 0), n_trees=5)
        back = Predictor.from_dict(json.loads(json.dumps(p.to_dict())))
        assert back.members == (1, 2)
        assert np.array_equal(back.predict_matrix(X), p.predict_matrix(X))
        assert np.all(np.isfinite(p.predict_matrix(X)))
        assert predict(p, X[4]) == p.predict_matrix(X)[4]

    def test_constant_round_trip(self):
        assert isinstance(model_from_dict(ConstantModel(2.5).to_dict()), ConstantModel)
        with pytest.raises(ValueError):
            model_from_dict({"type": "forest"})

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            fit_predictor(np.zeros((5, 2)), 0, (1,), "SVR")

    def test_linear_model_length(self):
        m = LinearModel(np.array([1.0, 2.0]), 0.5)
        assert m.predict(np.array([[1.0, 1.0]]))[0] == 3.5
