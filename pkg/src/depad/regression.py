"""Dependency models: CART regression trees, bagged tree ensembles, and linear models.

All models predict from a 2-d array whose columns are the model's predictors,
in the order they were fitted on.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

MODEL_KINDS = ("CART", "MCART", "OLS", "RIDGE", "LASSO")

SCHEMA_VERSION = 1

TIE_RTOL = 1e-12


@dataclass(frozen=True)
class TreeParams:
    min_split: int = 20
    min_bucket: int = 7
    cp: float = 0.003
    max_depth: int = 30


@dataclass(eq=False)
class RegressionTree:
    """Binary regression tree stored as parallel node arrays.

    ``feature[k] == -1`` marks a leaf. Internal nodes send a row left when
    ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    params: TreeParams = field(default_factory=TreeParams)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, k: int) -> bool:
        return self.feature[k] < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=int)
        while True:
            f = self.feature[node]
            active = np.flatnonzero(f >= 0)
            if active.size == 0:
                return node
            cur = node[active]
            go_left = X[active, f[active]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def depth(self) -> int:
        def walk(k):
            return 0 if self.is_leaf(k) else 1 + max(walk(self.left[k]), walk(self.right[k]))
        return walk(0)

    def to_dict(self) -> dict:
        return {
            "type": "tree",
            "params": vars(self.params).copy(),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "count": self.count.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RegressionTree":
        return cls(
            np.array(doc["feature"], dtype=int),
            np.array(doc["threshold"], dtype=float),
            np.array(doc["left"], dtype=int),
            np.array(doc["right"], dtype=int),
            np.array(doc["value"], dtype=float),
            np.array(doc["count"], dtype=int),
            TreeParams(**doc["params"]),
        )


def best_split(X: np.ndarray, y: np.ndarray, min_bucket: int = 1):
    """Exact search for the split with the largest SSE reduction.

    Candidates are midpoints between consecutive distinct sorted values of each
    predictor; both children must keep at least ``min_bucket`` rows. Ties go to
    the lowest predictor index, then the lowest threshold. Returns
    ``(feature, threshold, gain)`` or None when no split is admissible.
    """
    k, p = X.shape
    if p == 0 or k < 2 * min_bucket or k < 2:
        return None
    yc = y - y.mean()
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    ys = yc[order]
    left_sum = np.cumsum(ys, axis=0)[:-1]
    total = left_sum[-1] + ys[-1] if k > 1 else ys[0]
    nl = np.arange(1, k, dtype=float)[:, None]
    nr = k - nl
    gain = left_sum ** 2 / nl + (total - left_sum) ** 2 / nr - total ** 2 / k
    valid = (xs[:-1] < xs[1:]) & (nl >= min_bucket) & (nr >= min_bucket)
    gain = np.where(valid, gain, -np.inf)
    flat = gain.T.ravel()
    top = float(np.max(flat))
    if not np.isfinite(top):
        return None
    # the same partition reached through different predictors can differ in the
    # last bits; treat gains within rounding noise as tied
    best = int(np.flatnonzero(flat >= top - TIE_RTOL * max(abs(top), np.finfo(float).tiny))[0])
    f, t = divmod(best, k - 1)
    lo, hi = xs[t, f], xs[t + 1, f]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return f, float(thr), float(flat[best])


def canonical_rows(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Permutation sorting the rows of (X, y) lexicographically.

    Fitting on rows in this order makes every model, resample and fold
    assignment independent of the order objects arrive in.
    """
    return np.lexsort(np.column_stack([X, y]).T[::-1])


def fit_cart(X, y, params: TreeParams = TreeParams()) -> RegressionTree:
    """Grow a regression tree by greedy SSE-reduction splitting.

    A node is split only if it holds at least ``min_split`` rows, both
    children keep ``min_bucket`` rows and the SSE reduction is at least
    ``cp`` times the root SSE. No pruning pass follows.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    if len(y) < 1:
        raise ValueError("fit_cart needs at least one row")
    order = canonical_rows(X, y)
    X, y = X[order], y[order]
    root_sse = float(np.sum((y - y.mean()) ** 2))
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(np.mean(y[rows])))
        count.append(len(rows))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        k, rows, depth = stack.pop()
        if len(rows) < params.min_split or depth >= params.max_depth or root_sse <= 0:
            continue
        split = best_split(X[rows], y[rows], params.min_bucket)
        if split is None:
            continue
        f, thr, gain = split
        if gain <= 0 or gain < params.cp * root_sse:
            continue
        go_left = X[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        feature[k], threshold[k] = f, thr
        left[k] = new_node(lrows)
        right[k] = new_node(rrows)
        stack.append((right[k], rrows, depth + 1))
        stack.append((left[k], lrows, depth + 1))

    return RegressionTree(
        np.array(feature, dtype=int), np.array(threshold, dtype=float),
        np.array(left, dtype=int), np.array(right, dtype=int),
        np.array(value, dtype=float), np.array(count, dtype=int), params,
    )


@dataclass(eq=False)
class BaggedModel:
    trees: list
    aggregate: str = "mean"
    rng_seed: tuple = (0,)
    bootstrap: bool = True

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def tree_predictions(self, X) -> np.ndarray:
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X) -> np.ndarray:
        # sorting per object makes the reduction independent of tree order
        preds = np.sort(self.tree_predictions(X), axis=0)
        if self.aggregate == "median":
            return np.median(preds, axis=0)
        return np.mean(preds, axis=0)

    def to_dict(self) -> dict:
        return {
            "type": "bagged",
            "aggregate": self.aggregate,
            "rng_seed": list(self.rng_seed),
            "bootstrap": self.bootstrap,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BaggedModel":
        return cls([RegressionTree.from_dict(t) for t in doc["trees"]], doc["aggregate"],
                   tuple(doc["rng_seed"]), doc["bootstrap"])


def _seed_tuple(seed) -> tuple:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def fit_bagged(X, y, n_trees: int = 25, aggregate: str = "mean", seed=0,
               params: TreeParams = TreeParams(), bootstrap: bool = True, threads: int = 1) -> BaggedModel:
    """Bootstrap-aggregated CART trees; ``aggregate="median"`` gives mCART.

    Tree ``t`` resamples n rows with replacement from its own generator seeded
    by ``(*seed, t)``, so the ensemble is identical for any ``threads``.
    Resampling indexes the rows in canonical order, so it does not depend on
    object order either.
    """
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if aggregate not in ("mean", "median"):
        raise ValueError(f"aggregate must be 'mean' or 'median', got {aggregate!r}")
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    seed = _seed_tuple(seed)
    n = len(y)
    order = canonical_rows(X, y)
    X, y = X[order], y[order]

    def grow(t: int) -> RegressionTree:
        if not bootstrap:
            return fit_cart(X, y, params)
        rng = np.random.default_rng(np.random.SeedSequence([*seed, t]))
        rows = rng.integers(0, n, size=n)
        return fit_cart(X[rows], y[rows], params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(grow, range(n_trees)))
    else:
        trees = [grow(t) for t in range(n_trees)]
    return BaggedModel(trees, aggregate, seed, bootstrap)


@dataclass(eq=False)
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    kind: str = "OLS"
    lam: float = 0.0
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_scale: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, len(self.coefficients))
        # column-by-column accumulation: BLAS products may round rows differently by position
        acc = np.zeros(X.shape[0])
        for k, c in enumerate(self.coefficients):
            acc += X[:, k] * c
        return acc + self.intercept

    def to_dict(self) -> dict:
        return {
            "type": "linear",
            "kind": self.kind,
            "lambda": self.lam,
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearModel":
        return cls(np.array(doc["coefficients"], dtype=float), float(doc["intercept"]), doc["kind"],
                   float(doc["lambda"]), np.array(doc["x_mean"], dtype=float), np.array(doc["x_scale"], dtype=float))


@dataclass(eq=False)
class ConstantModel:
    """Fallback for a variable without relevant variables: predicts its training median."""

    value: float

    def predict(self, X) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.value)

    def to_dict(self) -> dict:
        return {"type": "constant", "value": self.value}


def soft_threshold(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def _standardize(X: np.ndarray):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 0
    Z = np.zeros_like(X)
    Z[:, keep] = (X[:, keep] - mu[keep]) / sd[keep]
    return Z, mu, sd, keep


def _lasso_cd(C: np.ndarray, b: np.ndarray, lam: float, beta0=None, tol: float = 1e-7,
              max_iter: int = 100_000) -> np.ndarray:
    """Cyclic coordinate descent on (1/2n)||y - Z beta||^2 + lam ||beta||_1 with unit-variance columns.

    Works on the scaled Gram matrix C = Z'Z/n and b = Z'y/n.
    """
    p = len(b)
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    grad = b - C @ beta
    for _ in range(max_iter):
        biggest = 0.0
        for j in range(p):
            old = beta[j]
            new = soft_threshold(grad[j] + C[j, j] * old, lam) / C[j, j]
            if new != old:
                grad -= C[:, j] * (new - old)
                beta[j] = new
                biggest = max(biggest, abs(new - old))
        if biggest < tol:
            break
    return beta


def _problem(X: np.ndarray, y: np.ndarray):
    """Standardized design restricted to non-constant columns, with C = Z'Z/n and b = Z'(y - ybar)/n."""
    Z, mu, sd, keep = _standardize(X)
    ybar = float(y.mean())
    Zk = np.ascontiguousarray(Z[:, keep])
    n = len(y)
    return Zk, mu, sd, keep, ybar, Zk.T @ Zk / n, Zk.T @ (y - ybar) / n


def _solve(C: np.ndarray, b: np.ndarray, kind: str, lam: float, warm=None) -> np.ndarray:
    p = len(b)
    if kind == "LASSO" and lam > 0:
        return _lasso_cd(C, b, lam, warm)
    A = C + (lam if kind == "RIDGE" else 0.0) * np.eye(p)
    if np.linalg.matrix_rank(A) < p:
        A = A + 1e-10 * np.eye(p)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.linalg.solve(A + 1e-10 * np.eye(p), b)


def _fit_at(X: np.ndarray, y: np.ndarray, kind: str, lam: float, warm=None):
    """Fit at one lambda; returns (coef on original scale, intercept, standardized beta)."""
    _, mu, sd, keep, ybar, C, b = _problem(X, y)
    beta = np.zeros(X.shape[1])
    if keep.any():
        w = None if warm is None else warm[keep]
        beta[keep] = _solve(C, b, kind, lam, w)
    coef = np.zeros(X.shape[1])
    coef[keep] = beta[keep] / sd[keep]
    return coef, ybar - float(coef @ mu), beta


def lambda_max(X, y) -> float:
    """Smallest lambda at which the lasso sets every standardized coefficient to zero."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    order = canonical_rows(X, y)
    b = _problem(X[order], y[order])[-1]
    return float(np.max(np.abs(b))) if b.size else 0.0


def default_lambda_grid(X, y, size: int = 50, ratio: float = 1e-4) -> np.ndarray:
    top = lambda_max(X, y)
    if top <= 0:
        return np.array([0.0])
    return np.geomspace(top, ratio * top, size)


def cv_folds_for(n: int, folds: int, seed: int = 0) -> np.ndarray:
    k = max(2, min(folds, n))
    perm = np.random.default_rng(seed).permutation(n)
    assign = np.empty(n, dtype=int)
    assign[perm] = np.arange(n) % k
    return assign


def fit_linear(X, y, kind: str = "OLS", lambda_grid: Optional[Sequence[float]] = None,
               cv_folds: int = 10, lam: Optional[float] = None, seed: int = 0) -> LinearModel:
    """OLS, Ridge or Lasso on standardized predictors; coefficients reported on the original scale.

    For Ridge and Lasso, ``lam`` fixes the penalty; otherwise it is chosen from
    ``lambda_grid`` (default: 50 log-spaced values from lambda_max down to
    1e-4 lambda_max) by ``cv_folds``-fold cross-validated mean squared error.
    The Ridge penalty is (lam/2)||beta||^2 on the same 1/(2n) loss scale as Lasso.
    """
    kind = kind.upper()
    if kind not in ("OLS", "RIDGE", "LASSO"):
        raise ValueError(f"unknown linear model kind {kind!r}")
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    if len(y) < 2:
        raise ValueError("fit_linear needs at least two rows")
    order = canonical_rows(X, y)
    X, y = X[order], y[order]
    p = X.shape[1]
    if p == 0:
        return LinearModel(np.zeros(0), float(y.mean()), kind, 0.0)

    if kind == "OLS":
        chosen = 0.0
    elif lam is not None:
        chosen = float(lam)
    else:
        grid = np.sort(np.asarray(
            default_lambda_grid(X, y) if lambda_grid is None else lambda_grid, dtype=float))[::-1]
        chosen = _cross_validate(X, y, kind, grid, cv_folds, seed)

    coef, intercept, _ = _fit_at(X, y, kind, chosen)
    _, mu, sd, _ = _standardize(X)
    return LinearModel(coef, intercept, kind, chosen, mu, sd)


def _cross_validate(X, y, kind, grid, folds, seed) -> float:
    if len(grid) == 1:
        return float(grid[0])
    assign = cv_folds_for(len(y), folds, seed)
    errors = np.zeros(len(grid))
    for f in np.unique(assign):
        train, test = assign != f, assign == f
        warm = None
        for g, lam in enumerate(grid):
            coef, intercept, warm = _fit_at(X[train], y[train], kind, lam, warm)
            errors[g] += np.sum((y[test] - X[test] @ coef - intercept) ** 2)
    # grid is descending, so argmin's first hit prefers the larger penalty on ties
    return float(grid[int(np.argmin(errors))])


Model = Union[RegressionTree, BaggedModel, LinearModel, ConstantModel]


def model_from_dict(doc: dict) -> Model:
    kind = doc["type"]
    if kind == "tree":
        return RegressionTree.from_dict(doc)
    if kind == "bagged":
        return BaggedModel.from_dict(doc)
    if kind == "linear":
        return LinearModel.from_dict(doc)
    if kind == "constant":
        return ConstantModel(float(doc["value"]))
    raise ValueError(f"unknown model type {kind!r}")


@dataclass(eq=False)
class Predictor:
    """Model g_j predicting variable ``target`` from the columns ``members``."""

    target: int
    members: tuple
    model: Model

    @property
    def is_fallback(self) -> bool:
        return isinstance(self.model, ConstantModel)

    def predict_matrix(self, X) -> np.ndarray:
        """Predictions for every row of a full data matrix (all m columns)."""
        X = np.asarray(X, dtype=float)
        return self.model.predict(X[:, list(self.members)])

    def to_dict(self) -> dict:
        return {"target": self.target, "members": list(self.members), "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Predictor":
        return cls(int(doc["target"]), tuple(doc["members"]), model_from_dict(doc["model"]))


def predict(p: Predictor, row) -> float:
    """Expected value of ``p.target`` for one object given its full row of values."""
    return float(p.predict_matrix(np.asarray(row, dtype=float)[None, :])[0])


def fit_predictor(X_full: np.ndarray, target: int, members: Sequence[int], kind: str, *,
                  seed=0, n_trees: int = 25, params: TreeParams = TreeParams(), cv_folds: int = 10,
                  threads: int = 1) -> Predictor:
    """Train g_target on ``members``; an empty member list gives the median fallback."""
    kind = kind.upper()
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    y = X_full[:, target]
    members = tuple(int(v) for v in members)
    if not members:
        return Predictor(target, (), ConstantModel(float(np.median(y))))
    X = X_full[:, list(members)]
    if kind in ("CART", "MCART"):
        model = fit_bagged(X, y, n_trees, "median" if kind == "MCART" else "mean", seed, params, threads=threads)
    else:
        model = fit_linear(X, y, kind, cv_folds=cv_folds, seed=_seed_tuple(seed)[0])
    return Predictor(target, members, model)
