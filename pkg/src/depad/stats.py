"""Dependence measures and significance tests.

Partial correlation with Fisher's z test is the conditional-independence
oracle behind the Markov-blanket selectors; mutual information and distance
correlation score candidates for the filter selectors; the rank-sum test
compares per-trial benchmark results.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

Alternative = Literal["two-sided", "greater", "less"]

# |rho| == 1 gives an infinite z; report this finite stand-in instead.
Z_SENTINEL = float(np.finfo(float).max)

_DEGENERATE_TOL = 1e-10


@dataclass(frozen=True)
class CITestResult:
    statistic: float
    p_value: float
    independent: bool
    alpha: float
    rho: float = 0.0
    degenerate: bool = False


@dataclass(frozen=True)
class RankSumResult:
    statistic: float
    p_value: float
    alternative: str


def _matrix(d) -> np.ndarray:
    values = getattr(d, "values", d)
    return np.asarray(values, dtype=float)


def correlation_matrix(X: np.ndarray) -> np.ndarray:
    """Pearson correlation matrix with zero rows/columns (and zero diagonal) for constant columns.

    Rows are sorted lexicographically first, so the result is bit-identical
    under any reordering of the objects.
    """
    X = np.asarray(X, dtype=float)
    X = X[np.lexsort(X.T[::-1])]
    Z = X - X.mean(axis=0)
    sd = np.sqrt(np.mean(Z * Z, axis=0))
    ok = sd > 0
    Z[:, ok] /= sd[ok]
    Z[:, ~ok] = 0.0
    R = Z.T @ Z / X.shape[0]
    np.fill_diagonal(R, ok.astype(float))
    return R


def _cond_inverse(R: np.ndarray, cond: Sequence[int]) -> np.ndarray:
    return np.linalg.pinv(R[np.ix_(cond, cond)], rcond=1e-10, hermitian=True)


def partial_from_correlation(R: np.ndarray, i: int, j: int, cond: Sequence[int] = (),
                             inverse=None) -> tuple[float, bool]:
    """Partial correlation of i and j given ``cond`` from a correlation matrix.

    Returns ``(rho, degenerate)``. A variable that is constant, or that is
    fully determined by the conditioning set, is degenerate and gets rho = 0.
    Singular conditioning blocks (e.g. one-hot siblings) go through a
    pseudo-inverse, which matches regressing on the span of ``cond``.
    ``inverse`` maps a sorted conditioning tuple to that pseudo-inverse and
    lets callers reuse it across tests.
    """
    i, j = min(i, j), max(i, j)  # exact symmetry in (i, j) and in the order of cond
    cond = sorted(cond)
    if not cond:
        vi, vj, c = R[i, i], R[j, j], R[i, j]
    else:
        P = inverse(tuple(cond)) if inverse is not None else _cond_inverse(R, cond)
        ri, rj = R[i, cond], R[j, cond]
        vi = R[i, i] - ri @ P @ ri
        vj = R[j, j] - rj @ P @ rj
        c = R[i, j] - ri @ P @ rj
    if vi <= _DEGENERATE_TOL or vj <= _DEGENERATE_TOL:
        return 0.0, True
    return float(np.clip(c / math.sqrt(vi * vj), -1.0, 1.0)), False


def partial_correlation(d, i: int, j: int, cond: Sequence[int] = ()) -> float:
    """rho_{ij.cond} for columns of a Dataset or 2-d array (0.0 when degenerate)."""
    if i == j or i in cond or j in cond:
        raise ValueError("i and j must differ and lie outside the conditioning set")
    X = _matrix(d)
    idx = [min(i, j), max(i, j), *sorted(cond)]
    R = correlation_matrix(X[:, idx])
    return partial_from_correlation(R, 0, 1, range(2, len(idx)))[0]


def partial_correlation_residuals(d, i: int, j: int, cond: Sequence[int] = ()) -> float:
    """Same quantity as :func:`partial_correlation`, via least-squares residuals."""
    X = _matrix(d)
    n = X.shape[0]
    design = np.column_stack([np.ones(n), X[:, list(cond)]]) if len(cond) else np.ones((n, 1))

    def resid(y):
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return y - design @ coef

    ri, rj = resid(X[:, i]), resid(X[:, j])
    si, sj = np.sqrt(ri @ ri / n), np.sqrt(rj @ rj / n)
    floor = math.sqrt(_DEGENERATE_TOL)
    if si <= floor * np.std(X[:, i]) or sj <= floor * np.std(X[:, j]) or min(si, sj) == 0:
        return 0.0
    return float(np.clip((ri @ rj / n) / (si * sj), -1.0, 1.0))


def fisher_z(rho: float, n: int, n_cond: int, alpha: float = 0.01, degenerate: bool = False) -> CITestResult:
    """Two-sided Fisher z test of a (partial) correlation estimated from n samples."""
    dof = n - n_cond - 3
    if dof <= 0:
        raise ValueError(f"Fisher z needs n - |cond| - 3 > 0 (n={n}, |cond|={n_cond})")
    if degenerate:
        return CITestResult(0.0, 1.0, True, alpha, 0.0, True)
    if abs(rho) >= 1.0:
        return CITestResult(math.copysign(Z_SENTINEL, rho), 0.0, False, alpha, float(rho))
    z = math.atanh(rho) * math.sqrt(dof)
    p = float(min(1.0, 2.0 * ndtr(-abs(z))))
    return CITestResult(z, p, p > alpha, alpha, float(rho))


def fisher_z_test(d, i: int, j: int, cond: Sequence[int] = (), alpha: float = 0.01) -> CITestResult:
    if i == j or i in cond or j in cond:
        raise ValueError("i and j must differ and lie outside the conditioning set")
    X = _matrix(d)
    idx = [min(i, j), max(i, j), *sorted(cond)]
    R = correlation_matrix(X[:, idx])
    rho, degenerate = partial_from_correlation(R, 0, 1, range(2, len(idx)))
    return fisher_z(rho, X.shape[0], len(cond), alpha, degenerate)


class CorrelationCITest:
    """Fisher z tests against one precomputed correlation matrix.

    Selectors run thousands of tests on the same data, so the O(n m^2)
    correlation pass is paid once. Pseudo-inverses of recent conditioning
    blocks are memoized, since a selector sweep tests many candidates against
    the same set.
    """

    def __init__(self, X: np.ndarray, alpha: float = 0.01):
        X = _matrix(X)
        self.n = X.shape[0]
        self.alpha = alpha
        self.R = correlation_matrix(X)
        self._inverse = functools.lru_cache(maxsize=256)(lambda cond: _cond_inverse(self.R, cond))

    def can_test(self, n_cond: int) -> bool:
        return self.n - n_cond - 3 > 0

    def __call__(self, i: int, j: int, cond: Sequence[int] = ()) -> CITestResult:
        rho, degenerate = partial_from_correlation(self.R, i, j, cond, self._inverse)
        return fisher_z(rho, self.n, len(cond), self.alpha, degenerate)


def equal_frequency_bins(x: np.ndarray, bins: int) -> np.ndarray:
    """Bin codes 0..bins-1 by rank; tied values always share a bin."""
    x = np.asarray(x, dtype=float)
    ranks = rankdata(x, method="min")
    return np.minimum(((ranks - 1) * bins) // len(x), bins - 1).astype(int)


def mutual_information(d, i: int, j: int, bins: int | None = None) -> float:
    """Plug-in mutual information (nats) after equal-frequency binning.

    ``bins`` defaults to ceil(sqrt(n)).
    """
    X = _matrix(d)
    n = X.shape[0]
    if bins is None:
        bins = max(2, math.ceil(math.sqrt(n)))
    if bins < 2:
        raise ValueError("bins must be >= 2")
    x, y = X[:, i], X[:, j]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    bx, by = equal_frequency_bins(x, bins), equal_frequency_bins(y, bins)
    joint = np.bincount(bx * bins + by, minlength=bins * bins).reshape(bins, bins) / n
    px, py = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / np.outer(px, py)[nz]))
    return max(0.0, float(mi))


def _double_centered_distances(x: np.ndarray) -> np.ndarray:
    a = np.abs(x[:, None] - x[None, :])
    row = a.mean(axis=1)
    return a - row[:, None] - row[None, :] + row.mean()


def distance_correlation(d, i: int, j: int) -> float:
    """Sample distance correlation of columns i and j (O(n^2) memory)."""
    X = _matrix(d)
    if X.shape[0] < 4:
        raise ValueError("distance correlation needs n >= 4")
    order = np.lexsort((X[:, j], X[:, i]))  # object-order independent reductions
    x, y = X[order, i], X[order, j]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    A = _double_centered_distances(x)
    B = _double_centered_distances(y)
    dcov2 = np.mean(A * B)
    dvar = math.sqrt(np.mean(A * A) * np.mean(B * B))
    if dvar <= 0:
        return 0.0
    return float(min(1.0, math.sqrt(max(dcov2, 0.0) / dvar)))


def rank_sum_test(
    a: Sequence[float],
    b: Sequence[float],
    alternative: Alternative = "two-sided",
    method: Literal["auto", "exact", "normal"] = "auto",
) -> RankSumResult:
    """Wilcoxon rank-sum (Mann-Whitney U) test; U is computed for ``a``.

    ``alternative="greater"`` tests whether ``a`` tends to exceed ``b``. Ties
    receive average ranks. ``auto`` enumerates every split of the pooled ranks
    when |a| + |b| <= 12, otherwise uses the tie-corrected normal
    approximation with continuity correction.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = len(a), len(b)
    if na < 1 or nb < 1:
        raise ValueError("both samples need at least one value")
    N = na + nb
    ranks = rankdata(np.concatenate([a, b]))
    offset = na * (na + 1) / 2.0
    u = float(ranks[:na].sum() - offset)
    mu = na * nb / 2.0
    if method == "exact" or (method == "auto" and N <= 12):
        us = np.array([ranks[list(c)].sum() - offset for c in itertools.combinations(range(N), na)])
        eps = 1e-9
        if alternative == "greater":
            p = np.mean(us >= u - eps)
        elif alternative == "less":
            p = np.mean(us <= u + eps)
        else:
            p = np.mean(np.abs(us - mu) >= abs(u - mu) - eps)
        return RankSumResult(u, float(min(1.0, p)), alternative)

    _, counts = np.unique(ranks, return_counts=True)
    tie_term = np.sum(counts ** 3 - counts) / (N * (N - 1)) if N > 1 else 0.0
    var = na * nb / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        return RankSumResult(u, 1.0, alternative)
    sd = math.sqrt(var)
    if alternative == "greater":
        p = 1.0 - ndtr((u - mu - 0.5) / sd)
    elif alternative == "less":
        p = ndtr((u - mu + 0.5) / sd)
    else:
        p = 2.0 * (1.0 - ndtr((abs(u - mu) - 0.5) / sd))
    return RankSumResult(u, float(min(1.0, max(0.0, p))), alternative)
