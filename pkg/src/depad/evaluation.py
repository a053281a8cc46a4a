"""Detection metrics, proximity baselines and the repeated-sampling benchmark."""

from __future__ import annotations

import csv
import io
import math
import time
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from depad._io import atomic_write_json, atomic_write_text
from depad.data import BenchmarkSpec, Dataset, sample_benchmark
from depad.engine import PipelineConfig, ScoreVector, detect
from depad.stats import rank_sum_test

BASELINES = ("WKNN", "LOF", "RANDOM")
_BASELINE_NAMES = {"WKNN": "wkNN", "LOF": "LOF", "RANDOM": "random"}


def _check_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    if y.all() or not y.any():
        raise ValueError("metrics need both anomalies and normal objects")
    return s, y


def roc_auc(scores, labels) -> float:
    """Probability that a random anomaly outscores a random normal object, ties counting one half."""
    s, y = _check_labels(scores, labels)
    ranks = rankdata(s)
    na = int(y.sum())
    nn = len(y) - na
    u = ranks[y].sum() - na * (na + 1) / 2.0
    return float(u / (na * nn))


def score_ranks(scores) -> np.ndarray:
    """1-based ranks by descending score; equal scores are ranked by ascending object index."""
    s = np.asarray(scores, dtype=float)
    order = np.lexsort((np.arange(len(s)), -s))
    r = np.empty(len(s), dtype=int)
    r[order] = np.arange(1, len(s) + 1)
    return r


def average_precision(scores, labels, standard: bool = False) -> float:
    """Mean of P@rank(a) over the anomalies a.

    By default P@l is the number of anomalies ranked at or above l divided by
    the number of anomalies, which makes the value depend only on the anomaly
    count. ``standard=True`` divides by l instead (the usual precision@l).
    """
    s, y = _check_labels(scores, labels)
    r = np.sort(score_ranks(s)[y])
    a = len(r)
    # exact rational arithmetic, rounded once
    if standard:
        total = sum(Fraction(k, int(rank)) for k, rank in enumerate(r, start=1))
    else:
        total = Fraction(a * (a + 1) // 2, a)
    return float(total / a)


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "wkNN"
    k: int = 10
    seed: int = 0

    def __post_init__(self):
        method = self.method.upper()
        if method not in BASELINES:
            raise ValueError(f"unknown baseline {self.method!r}; expected wkNN, LOF or random")
        object.__setattr__(self, "method", method)
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def instantiation_name(self) -> str:
        return _BASELINE_NAMES[self.method]


def _neighbours(X: np.ndarray, k: int):
    """k nearest neighbours of every row, itself excluded (distances ascending)."""
    n = X.shape[0]
    dist, idx = cKDTree(X).query(X, k=k + 1)
    keep = np.ones_like(idx, dtype=bool)
    self_hit = idx == np.arange(n)[:, None]
    has_self = self_hit.any(axis=1)
    keep[has_self] = ~self_hit[has_self]
    keep[~has_self, -1] = False  # duplicates crowded out the point itself
    return dist[keep].reshape(n, k), idx[keep].reshape(n, k)


def wknn_scores(X, k: int = 10) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    dist, _ = _neighbours(X, k)
    return dist.mean(axis=1)


def lof_scores(X, k: int = 10) -> np.ndarray:
    """Local outlier factor with exactly k neighbours per point.

    Zero reachability distances (duplicate points) are replaced by the
    smallest positive neighbour distance so densities stay finite.
    """
    X = np.asarray(X, dtype=float)
    dist, idx = _neighbours(X, k)
    positive = dist[dist > 0]
    if positive.size == 0:
        return np.ones(X.shape[0])
    k_dist = dist[:, -1]
    reach = np.maximum(k_dist[idx], dist)
    reach = np.where(reach > 0, reach, positive.min())
    lrd = 1.0 / reach.mean(axis=1)
    return lrd[idx].mean(axis=1) / lrd


def baseline_score(d: Dataset, cfg: BaselineConfig = BaselineConfig()) -> ScoreVector:
    """Proximity baselines on the raw, unstandardized feature space, or a seeded random control."""
    if cfg.method == "RANDOM":
        rng = np.random.default_rng(cfg.seed)
        return ScoreVector(rng.random(d.n), "random")
    if not cfg.k < d.n:
        raise ValueError(f"need k < n, got k={cfg.k}, n={d.n}")
    if cfg.method == "WKNN":
        return ScoreVector(wknn_scores(d.values, cfg.k), "wkNN")
    return ScoreVector(lof_scores(d.values, cfg.k), "LOF")


Method = Union[PipelineConfig, BaselineConfig]


def method_name(method: Method) -> str:
    return method.instantiation_name


def score_with(d: Dataset, method: Method) -> ScoreVector:
    if isinstance(method, BaselineConfig):
        return baseline_score(d, method)
    return detect(d, method).scores


@dataclass(frozen=True)
class TrialResult:
    trial: int
    roc_auc: float
    ap: float
    seconds: float


@dataclass
class EvaluationReport:
    method: str
    dataset: str
    trials: list = field(default_factory=list)
    error: Optional[str] = None

    def _values(self, metric: str) -> np.ndarray:
        return np.array([getattr(t, metric) for t in self.trials], dtype=float)

    def mean(self, metric: str = "roc_auc") -> float:
        v = self._values(metric)
        return float(v.mean()) if v.size else math.nan

    def sd(self, metric: str = "roc_auc") -> float:
        v = self._values(metric)
        return float(v.std(ddof=1)) if v.size > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dataset": self.dataset,
            "error": self.error,
            "mean_roc_auc": _finite(self.mean("roc_auc")),
            "sd_roc_auc": _finite(self.sd("roc_auc")),
            "mean_ap": _finite(self.mean("ap")),
            "sd_ap": _finite(self.sd("ap")),
            "trials": [vars(t).copy() for t in self.trials],
        }


def _finite(v: float) -> Optional[float]:
    return v if math.isfinite(v) else None


def _unique_names(methods: Sequence[Method]) -> list[str]:
    seen: dict[str, int] = {}
    names = []
    for m in methods:
        base = method_name(m)
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return names


def run_benchmark(d: Dataset, methods: Sequence[Method], spec: BenchmarkSpec = BenchmarkSpec(),
                  threads: int = 1, standard_ap: bool = False) -> list[EvaluationReport]:
    """Evaluate every method on every benchmark sample of ``d``.

    A random baseline gets a distinct seed per trial. A method that raises is
    reported with its error and no trials; the other methods still run.
    """
    if d.labels is None:
        raise ValueError("benchmarking needs a labeled dataset")
    samples = sample_benchmark(d, spec)
    names = _unique_names(methods)
    dataset_id = d.source or "dataset"

    def one(task):
        mi, t = task
        method = methods[mi]
        if isinstance(method, BaselineConfig) and method.method == "RANDOM":
            seed = int(np.random.SeedSequence([method.seed, spec.rng_seed, t]).generate_state(1)[0])
            method = BaselineConfig("random", method.k, seed)
        sample = samples[t]
        start = time.perf_counter()
        scores = score_with(sample, method).scores
        elapsed = time.perf_counter() - start
        return TrialResult(t, roc_auc(scores, sample.labels),
                           average_precision(scores, sample.labels, standard_ap), elapsed)

    def guarded(task):
        try:
            return one(task), None
        except Exception as exc:  # recorded per method, never fatal for the others
            return None, f"{type(exc).__name__}: {exc}"

    tasks = [(mi, t) for mi in range(len(methods)) for t in range(len(samples))]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(guarded, tasks))
    else:
        outcomes = [guarded(task) for task in tasks]

    reports = [EvaluationReport(name, dataset_id) for name in names]
    for (mi, _), (result, error) in zip(tasks, outcomes):
        rep = reports[mi]
        if rep.error is not None:
            continue
        if error is not None:
            rep.error, rep.trials = error, []
        else:
            rep.trials.append(result)
    return reports


def compare(reports: Sequence[EvaluationReport], metric: str = "roc_auc",
            alternative: str = "two-sided") -> np.ndarray:
    """Rank-sum p-values between methods on their per-trial metric values.

    Entry (a, b) tests method a against method b; with ``alternative="greater"``
    a small value means a tends to score higher. The diagonal and pairs with a
    failed method are NaN.
    """
    k = len(reports)
    P = np.full((k, k), np.nan)
    for a in range(k):
        for b in range(k):
            if a == b or not reports[a].trials or not reports[b].trials:
                continue
            P[a, b] = rank_sum_test(reports[a]._values(metric), reports[b]._values(metric), alternative).p_value
    return P


def summary_csv(reports: Sequence[EvaluationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "dataset", "trials", "mean_roc_auc", "sd_roc_auc", "mean_ap", "sd_ap", "error"])
    for r in reports:
        w.writerow([r.method, r.dataset, len(r.trials), repr(r.mean("roc_auc")), repr(r.sd("roc_auc")),
                    repr(r.mean("ap")), repr(r.sd("ap")), r.error or ""])
    return buf.getvalue()


def pvalue_csv(reports: Sequence[EvaluationReport], P: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *[r.method for r in reports]])
    for r, row in zip(reports, P):
        w.writerow([r.method, *["" if math.isnan(v) else repr(float(v)) for v in row]])
    return buf.getvalue()


def write_reports(reports: Sequence[EvaluationReport], out_dir, metric: str = "roc_auc") -> None:
    """Write summary.csv, pvalues.csv and report.json into ``out_dir``."""
    from pathlib import Path

    out = Path(out_dir)
    P = compare(reports, metric)
    atomic_write_text(out / "summary.csv", summary_csv(reports))
    atomic_write_text(out / "pvalues.csv", pvalue_csv(reports, P))
    atomic_write_json(out / "report.json", {
        "schema_version": 1,
        "comparison_metric": metric,
        "reports": [r.to_dict() for r in reports],
    })
