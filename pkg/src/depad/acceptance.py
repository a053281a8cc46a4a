"""Built-in acceptance suite, run by ``depad selftest`` and by the test suite.

Every criterion has a runtime limit that is part of its pass condition.
Each check compares against an oracle written independently of the code
under test.
"""

from __future__ import annotations

import contextlib
import io
import math
import tempfile
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from depad.data import BenchmarkSpec, Dataset, write_csv
from depad.engine import PipelineConfig, combine, detect, explain, robust_z
from depad.evaluation import BaselineConfig, average_precision, compare, roc_auc, run_benchmark, wknn_scores
from depad.regression import TreeParams, fit_cart, fit_linear, lambda_max
from depad.selection import SelectorConfig, select_all
from depad.synthetic import (DAG_PARENTS, age_weight, broken_dependencies, linear_gaussian, load_zoo,
                             markov_blankets, zoo_csv_path)


class Checker:
    """Collects comparisons; a corrupted checker makes every comparison fail."""

    def __init__(self, corrupt: bool = False):
        self.corrupt = corrupt
        self.failures: list[str] = []

    def ok(self, cond: bool, what: str) -> bool:
        if self.corrupt or not cond:
            self.failures.append(what)
            return False
        return True

    def close(self, a: float, b: float, tol: float, what: str) -> bool:
        tol = -1.0 if self.corrupt else tol
        return self.ok(abs(a - b) <= tol, f"{what}: |{a!r} - {b!r}| > {tol}")

    def at_least(self, value: float, bound: float, what: str) -> bool:
        return self.ok(value >= bound, f"{what}: {value!r} < {bound!r}")


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    seconds: float
    limit: float
    detail: str

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.number}. {self.title} ({self.seconds:.2f} s, limit {self.limit:g} s): {self.detail}"


@dataclass(frozen=True)
class Criterion:
    number: int
    title: str
    limit: float
    run: Callable[[Checker], str]


def _normalization(ck: Checker) -> str:
    worst = 0.0
    checked = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        raw = np.abs(rng.standard_t(3, size=(500, 20))) * rng.uniform(0.1, 100.0, 20)
        raw[:, seed % 20] = rng.integers(0, 3, 500)  # heavy ties
        raw[:, (seed + 7) % 20] = 0.0  # perfect predictor, degenerate
        norm, _, _, degenerate = robust_z(raw)
        ck.ok(bool(degenerate[(seed + 7) % 20]), f"seed {seed}: zero column not flagged degenerate")
        for j in np.flatnonzero(~degenerate):
            col = norm[:, j]
            med = float(np.median(col))
            aad = float(np.mean(np.abs(col - med)))
            ck.close(med, 0.0, 1e-9, f"seed {seed} col {j} median")
            ck.close(aad, 1.0, 1e-9, f"seed {seed} col {j} AAD")
            worst = max(worst, abs(med), abs(aad - 1.0))
            checked += 1
    return f"{checked} columns, worst deviation {worst:.2e}"


def _oracle_sum(values) -> float:
    return float(sum((Fraction(v) for v in values), Fraction(0)))


def _combination(ck: Checker) -> str:
    rng = np.random.default_rng(2)
    Z = rng.normal(0.0, 2.0, size=(1000, 12))
    Z[rng.random(Z.shape) < 0.1] = 0.0
    eta = 0.0
    ps = combine(Z, "PS", eta).scores
    sm = combine(Z, "Sum").scores
    mx = combine(Z, "Max").scores
    gs = combine(Z, "GS").scores
    rz = combine(Z, "RZPS", eta).scores
    sums = [_oracle_sum(row) for row in Z]
    mu = math.fsum(sums) / len(sums)
    sd = math.sqrt(math.fsum((s - mu) ** 2 for s in sums) / len(sums))
    for i, row in enumerate(Z):
        pruned = _oracle_sum(v for v in row if v > eta)
        ck.ok(ps[i] == pruned, f"row {i}: PS {ps[i]!r} != {pruned!r}")
        ck.ok(rz[i] == pruned, f"row {i}: RZPS {rz[i]!r} != {pruned!r}")
        ck.ok(sm[i] == sums[i], f"row {i}: Sum {sm[i]!r} != {sums[i]!r}")
        top = max(float(v) for v in row)
        ck.ok(mx[i] == top, f"row {i}: Max {mx[i]!r} != {top!r}")
        g = max(0.0, math.erf((sums[i] - mu) / (sd * math.sqrt(2.0))))
        ck.ok(gs[i] == g, f"row {i}: GS {gs[i]!r} != {g!r}")
        positive_sum = _oracle_sum(v for v in row if v > 0)
        ck.ok(ps[i] == positive_sum, f"row {i}: PS(eta=0) differs from the positive-part Sum")
    return "1000 rows, PS/RZPS/Sum/Max/GS identical to direct evaluation"


def _auc_oracle(s, y) -> float:
    pos = [a for a, lab in zip(s, y) if lab]
    neg = [b for b, lab in zip(s, y) if not lab]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def _ap_oracle(s, y) -> float:
    n = len(s)
    order = sorted(range(n), key=lambda i: (-s[i], i))
    rank = {i: r + 1 for r, i in enumerate(order)}
    anomalies = [i for i in range(n) if y[i]]
    A = len(anomalies)

    def p_at(l):
        return Fraction(sum(1 for i in anomalies if rank[i] <= l), A)

    return float(sum((p_at(rank[i]) for i in anomalies), Fraction(0)) / A)


def _metrics(ck: Checker) -> str:
    rng = np.random.default_rng(3)
    for t in range(200):
        n = int(rng.integers(2, 201))
        y = rng.random(n) < rng.uniform(0.05, 0.5)
        y[rng.integers(0, n)] = True
        y[rng.integers(0, n)] = False
        if y.all() or not y.any():
            y[0], y[-1] = True, False
        s = rng.integers(0, 8, n).astype(float) if t % 2 else rng.normal(size=n)
        ck.ok(roc_auc(s, y) == _auc_oracle(s.tolist(), y.tolist()), f"instance {t}: AUC differs from pairwise oracle")
        ck.ok(average_precision(s, y) == _ap_oracle(s.tolist(), y.tolist()), f"instance {t}: AP differs from formula")
    aucs = []
    for t in range(100):
        rng = np.random.default_rng([4, t])
        y = np.zeros(2000, dtype=bool)
        y[:1000] = True
        rng.shuffle(y)
        aucs.append(roc_auc(rng.random(2000), y))
        ck.close(aucs[-1], 0.5, 0.05, f"random trial {t} AUC")
    return f"200 oracle instances exact; random AUC in [{min(aucs):.3f}, {max(aucs):.3f}]"


def _f1(found: set, truth: set) -> float:
    if not found and not truth:
        return 1.0
    tp = len(found & truth)
    return 2.0 * tp / (len(found) + len(truth))


def _mb_recovery(ck: Checker) -> str:
    truth = markov_blankets(DAG_PARENTS)
    scores = {"FBED": [], "IAMB": []}
    for seed in range(20):
        d = Dataset(linear_gaussian(seed, 5000), tuple(f"v{k}" for k in range(10)))
        for method in scores:
            for s in select_all(d, SelectorConfig(method, alpha=0.01)):
                scores[method].append(_f1(set(s.members), truth[s.target]))
    means = {k: float(np.mean(v)) for k, v in scores.items()}
    for k, v in means.items():
        ck.at_least(v, 0.85, f"{k} mean Markov-blanket F1")
    return ", ".join(f"{k} F1 {v:.3f}" for k, v in means.items())


def _oracle_tree(X, y, rows):
    """Exhaustive recursive splitting with SSE computed directly; returns preorder split list."""
    rows = list(rows)
    ys = [y[i] for i in rows]
    if len(rows) < 2:
        return [("leaf", sum(ys) / len(ys))]

    def sse(idx):
        if not idx:
            return 0.0
        m = sum(y[i] for i in idx) / len(idx)
        return sum((y[i] - m) ** 2 for i in idx)

    parent = sse(rows)
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[i, f] for i in rows))
        for lo, hi in zip(vals, vals[1:]):
            thr = (lo + hi) / 2.0
            left = [i for i in rows if X[i, f] <= thr]
            right = [i for i in rows if X[i, f] > thr]
            child = sse(left) + sse(right)
            if best is None or child < best[0] - 1e-9 * parent:
                best = (child, f, thr, left, right)
    if best is None or parent - best[0] <= 0:
        return [("leaf", sum(ys) / len(ys))]
    _, f, thr, left, right = best
    return [("split", f, thr)] + _oracle_tree(X, y, left) + _oracle_tree(X, y, right)


def _tree_preorder(tree, k=0):
    if tree.feature[k] < 0:
        return [("leaf", float(tree.value[k]))]
    return ([("split", int(tree.feature[k]), float(tree.threshold[k]))]
            + _tree_preorder(tree, tree.left[k]) + _tree_preorder(tree, tree.right[k]))


def _regression(ck: Checker) -> str:
    rng = np.random.default_rng(5)
    for t in range(50):
        X = rng.normal(size=(10, 3))
        y = rng.normal(size=10)
        got = _tree_preorder(fit_cart(X, y, TreeParams(min_split=2, min_bucket=1, cp=0.0)))
        want = _oracle_tree(X, y, range(10))
        same = len(got) == len(want) and all(
            g[0] == w[0] and (g[1:] == w[1:] if g[0] == "split" else abs(g[1] - w[1]) <= 1e-12)
            for g, w in zip(got, want))
        ck.ok(same, f"problem {t}: tree differs from exhaustive oracle")
    for t in range(20):
        n, p = 60, 4
        X = rng.normal(size=(n, p)) * rng.uniform(0.5, 20.0, p) + rng.normal(0, 5, p)
        y = X @ rng.normal(size=p) + 3.0 + rng.normal(size=n)
        A = np.column_stack([np.ones(n), X])
        beta = np.linalg.solve(A.T @ A, A.T @ y)
        ols = fit_linear(X, y, "OLS")
        ck.close(ols.intercept, beta[0], 1e-8, f"problem {t}: OLS intercept")
        for j in range(p):
            ck.close(ols.coefficients[j], beta[j + 1], 1e-8, f"problem {t}: OLS coefficient {j}")
        ridge = fit_linear(X, y, "RIDGE", lam=0.0)
        ck.close(ridge.intercept, ols.intercept, 1e-7, f"problem {t}: Ridge(0) intercept")
        for j in range(p):
            ck.close(ridge.coefficients[j], ols.coefficients[j], 1e-7, f"problem {t}: Ridge(0) coefficient {j}")
        Z = (X - X.mean(axis=0)) / X.std(axis=0)
        yc = y - y.mean()
        top = lambda_max(X, y)
        for lam in (0.5 * top, 0.1 * top, 0.01 * top):
            lasso = fit_linear(X, y, "LASSO", lam=lam)
            b = lasso.coefficients * X.std(axis=0)
            grad = Z.T @ (yc - Z @ b) / n
            for j in range(p):
                if b[j] != 0.0:
                    ck.close(grad[j], lam * np.sign(b[j]), 1e-5, f"problem {t}: lasso stationarity coord {j}")
                else:
                    ck.ok(abs(grad[j]) <= lam + 1e-5, f"problem {t}: lasso subgradient coord {j}")
        for factor in (1.0, 1.5):
            zero = fit_linear(X, y, "LASSO", lam=factor * top)
            ck.ok(bool(np.all(zero.coefficients == 0.0)), f"problem {t}: lasso at {factor} lambda_max not all zero")
    return "50 trees match the exhaustive oracle; OLS/Ridge/Lasso oracles hold on 20 problems"


def _example_one(ck: Checker) -> str:
    worst_extreme, worst_planted = 10 ** 9, 0
    for seed in range(10):
        sample = age_weight(seed)
        cfg = PipelineConfig.from_name("FBED-CART-PS", seed=seed)
        ranks = detect(sample.dataset, cfg).scores.ranks()
        planted = max(int(ranks[i]) for i in sample.planted)
        extreme = int(ranks[sample.extreme])
        knn_top = int(np.lexsort((np.arange(sample.dataset.n), -wknn_scores(sample.dataset.values, 10)))[0])
        ck.ok(planted <= 10, f"seed {seed}: an off-curve object ranked {planted}")
        ck.ok(extreme > 45, f"seed {seed}: on-curve extreme object ranked {extreme}")
        ck.ok(knn_top == sample.extreme, f"seed {seed}: wkNN top object is {knn_top}")
        worst_extreme = min(worst_extreme, extreme)
        worst_planted = max(worst_planted, planted)
    return f"off-curve worst rank {worst_planted}, on-curve extreme best rank {worst_extreme}, wkNN #1 checked"


def _zoo(ck: Checker) -> str:
    d = load_zoo()
    passes = 0
    notes = []
    for seed in range(5):
        result = detect(d, PipelineConfig.from_name("FBED-CART-PS", seed=seed))
        top5 = {d.object_ids[i] for i in result.scores.top(5)}
        found = {"scorpion", "platypus", "seasnake"} <= top5
        report = explain(d, result.models, result.deviations, d.object_ids.index("scorpion"), 3, result.scores)
        backbone = [e for e in report.entries if e.variable == "backbone"]
        explained = bool(backbone) and backbone[0].observed == 0 and backbone[0].expected > 0.5
        passes += found and explained
        notes.append(f"seed {seed}: {'ok' if found and explained else 'miss'}")
    ck.at_least(passes, 4, "Zoo seeds passing")
    return f"{passes}/5 seeds ({'; '.join(notes)})"


def _determinism(ck: Checker) -> str:
    from depad.cli import main

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        aw = tmp / "age_weight.csv"
        write_csv(age_weight(0).dataset, aw)
        bd = tmp / "broken.csv"
        write_csv(broken_dependencies(1, 600, 30), bd)
        runs = [
            (str(zoo_csv_path()), ["--id-column", "name", "--drop-columns", "type"]),
            (str(aw), ["--label-column", "__label__", "--normal-labels", "normal"]),
            (str(bd), ["--label-column", "__label__", "--normal-labels", "normal", "--model", "mcart"]),
        ]
        for k, (path, extra) in enumerate(runs):
            outputs = []
            for threads in (1, 8):
                out = tmp / f"run{k}_{threads}"
                with contextlib.redirect_stdout(io.StringIO()):
                    code = main(["detect", "--data", path, "--out", str(out), "--threads", str(threads),
                                 "--seed", "7", "--top", "0", *extra])
                ck.ok(code == 0, f"dataset {k} threads {threads}: exit code {code}")
                outputs.append((out / "scores.csv").read_bytes() if code == 0 else b"")
            ck.ok(outputs[0] == outputs[1] and len(outputs[0]) > 0, f"dataset {k}: scores differ between 1 and 8 threads")
    return "3 datasets, byte-identical scores.csv for --threads 1 and 8"


def _benchmark(ck: Checker) -> str:
    d = broken_dependencies(11)
    methods = [PipelineConfig.from_name("FBED-CART-PS"), BaselineConfig("random", seed=11)]
    reports = run_benchmark(d, methods, BenchmarkSpec(0.01, 20, 11))
    for r in reports:
        ck.ok(r.error is None, f"{r.method} failed: {r.error}")
        ck.ok(len(r.trials) == 20, f"{r.method}: {len(r.trials)} trials instead of 20")
    gain = reports[0].mean() - reports[1].mean()
    p = float(compare(reports, alternative="greater")[0, 1])
    ck.at_least(gain, 0.3, "AUC gain of FBED-CART-PS over random")
    ck.ok(p < 0.01, f"rank-sum p {p!r} >= 0.01")
    return f"mean AUC {reports[0].mean():.3f} vs random {reports[1].mean():.3f}, rank-sum p {p:.2e}"


CRITERIA = (
    Criterion(1, "Normalization contract", 5.0, _normalization),
    Criterion(2, "Combination correctness", 1.0, _combination),
    Criterion(3, "Metric oracles", 10.0, _metrics),
    Criterion(4, "Markov blanket recovery", 60.0, _mb_recovery),
    Criterion(5, "Regression oracles", 30.0, _regression),
    Criterion(6, "On-curve extreme vs off-curve anomalies", 30.0, _example_one),
    Criterion(7, "Zoo case study", 20.0, _zoo),
    Criterion(8, "Determinism across thread counts", 60.0, _determinism),
    Criterion(9, "Benchmark protocol", 120.0, _benchmark),
)


def run_criterion(c: Criterion, corrupt: bool = False) -> CriterionResult:
    ck = Checker(corrupt)
    start = time.perf_counter()
    try:
        detail = c.run(ck)
    except Exception as exc:  # a crash is a failure, reported like one
        detail = f"raised {type(exc).__name__}: {exc}"
        ck.failures.append(detail)
    seconds = time.perf_counter() - start
    if seconds >= c.limit:
        ck.failures.append(f"runtime {seconds:.2f} s over the {c.limit:g} s limit")
    if ck.failures:
        shown = "; ".join(ck.failures[:3])
        more = f" (+{len(ck.failures) - 3} more)" if len(ck.failures) > 3 else ""
        detail = f"{shown}{more} | {detail}"
    return CriterionResult(c.number, c.title, not ck.failures, seconds, c.limit, detail)


def run_all(only: Optional[set] = None, inject_failure: Optional[int] = None) -> list[CriterionResult]:
    """Run the criteria (all, or the numbers in ``only``).

    ``inject_failure`` corrupts every tolerance of that criterion; it exists so
    the failure path can be tested.
    """
    return [run_criterion(c, corrupt=(c.number == inject_failure))
            for c in CRITERIA if only is None or c.number in only]
