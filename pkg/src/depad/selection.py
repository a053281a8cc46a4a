"""Relevant-variable selection for every variable of a dataset.

FBED and IAMB approximate the Markov blanket of a target with Fisher z
conditional-independence tests. The MI and DC filters keep every candidate
whose dependence score reaches a fixed fraction of the best candidate's score.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from depad.data import Dataset
from depad.stats import CorrelationCITest, CITestResult, distance_correlation, mutual_information

METHODS = ("FBED", "IAMB", "MI", "DC")


@dataclass(frozen=True)
class SelectorConfig:
    method: str = "FBED"
    alpha: float = 0.01
    slope_threshold: float = 0.8
    max_set_size: Optional[int] = None
    fbed_k: int = 1
    mi_bins: Optional[int] = None

    def __post_init__(self):
        method = self.method.upper()
        if method not in METHODS:
            raise ValueError(f"unknown selector {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "method", method)
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.slope_threshold <= 1:
            raise ValueError("slope_threshold must lie in (0, 1]")
        if self.max_set_size is not None and self.max_set_size < 0:
            raise ValueError("max_set_size must be non-negative")

    def cap(self, n: int, m: int) -> int:
        if self.max_set_size is not None:
            return min(self.max_set_size, m - 1)
        return min(m - 1, n // 10)


@dataclass(frozen=True)
class RelevantSet:
    target: int
    members: tuple[int, ...]
    method: str
    scores: Optional[tuple[float, ...]] = None
    truncated: bool = False

    def __post_init__(self):
        members = tuple(int(v) for v in self.members)
        if self.target in members:
            raise ValueError("target cannot be its own relevant variable")
        if len(set(members)) != len(members):
            raise ValueError("duplicate relevant variables")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def to_dict(self, var_names: Sequence[str]) -> dict:
        return {
            "target": var_names[self.target],
            "members": [var_names[v] for v in self.members],
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, doc: dict, var_names: Sequence[str]) -> "RelevantSet":
        index = {name: k for k, name in enumerate(var_names)}
        return cls(index[doc["target"]], tuple(index[v] for v in doc["members"]), doc["method"])


def _candidates(d: Dataset, j: int) -> list[int]:
    return [i for i in range(d.m) if i != j and not d.constant[i]]


def _strongest(pool: Sequence[int], results: dict[int, CITestResult]) -> int:
    # largest |z| (equivalently smallest p for a shared conditioning set); lowest index on ties
    return min(pool, key=lambda v: (-abs(results[v].statistic), v))


def _backward(test: CorrelationCITest, j: int, selected: list[int]) -> list[int]:
    """Drop the least dependent member while any member is independent given the rest."""
    selected = list(selected)
    while selected:
        results = {v: test(j, v, [u for u in selected if u != v]) for v in selected}
        weakest = min(selected, key=lambda v: (-results[v].p_value, abs(results[v].statistic), v))
        if not results[weakest].independent:
            break
        selected.remove(weakest)
    return selected


def select_fbed(d: Dataset, j: int, cfg: SelectorConfig = SelectorConfig("FBED"),
                test: Optional[CorrelationCITest] = None) -> RelevantSet:
    """Forward-backward selection with early dropping.

    Runs ``cfg.fbed_k + 1`` forward passes. In a pass, every remaining
    candidate is tested against the target given the current selection;
    independent candidates are dropped for the rest of the pass and the most
    dependent one is added. Later passes reconsider all dropped candidates,
    which is how spouses (dependent only given a common child) get in. A
    backward pass then removes members that are independent given the rest.
    """
    if test is None:
        test = CorrelationCITest(d.values, cfg.alpha)
    if d.constant[j]:
        return RelevantSet(j, (), "FBED")
    cap = cfg.cap(d.n, d.m)
    selected: list[int] = []
    truncated = False
    for _ in range(cfg.fbed_k + 1):
        remaining = [v for v in _candidates(d, j) if v not in selected]
        added = False
        while remaining:
            if len(selected) >= cap or not test.can_test(len(selected)):
                truncated = True
                break
            results = {v: test(j, v, selected) for v in remaining}
            remaining = [v for v in remaining if not results[v].independent]
            if not remaining:
                break
            best = _strongest(remaining, results)
            selected.append(best)
            remaining.remove(best)
            added = True
        if not added or truncated:
            break
    return RelevantSet(j, tuple(_backward(test, j, selected)), "FBED", truncated=truncated)


def select_iamb(d: Dataset, j: int, cfg: SelectorConfig = SelectorConfig("IAMB"),
                test: Optional[CorrelationCITest] = None) -> RelevantSet:
    """Incremental association Markov blanket: grow on the whole current blanket, then shrink."""
    if test is None:
        test = CorrelationCITest(d.values, cfg.alpha)
    if d.constant[j]:
        return RelevantSet(j, (), "IAMB")
    cap = cfg.cap(d.n, d.m)
    blanket: list[int] = []
    truncated = False
    while True:
        rest = [v for v in _candidates(d, j) if v not in blanket]
        if not rest:
            break
        if len(blanket) >= cap or not test.can_test(len(blanket)):
            truncated = True
            break
        results = {v: test(j, v, blanket) for v in rest}
        best = _strongest(rest, results)
        if results[best].independent:
            break
        blanket.append(best)
    return RelevantSet(j, tuple(_backward(test, j, blanket)), "IAMB", truncated=truncated)


def threshold_select(scores: Sequence[float], slope_threshold: float) -> list[int]:
    """Positions whose score is at least ``slope_threshold`` times the maximum (empty if max <= 0)."""
    scores = np.asarray(scores, dtype=float)
    if len(scores) == 0 or scores.max() <= 0:
        return []
    cut = slope_threshold * scores.max()
    return [k for k in np.argsort(-scores, kind="stable") if scores[k] >= cut]


def select_filter(d: Dataset, j: int, cfg: SelectorConfig = SelectorConfig("MI")) -> RelevantSet:
    """Score candidates with MI or distance correlation and keep those near the top score.

    Binary columns encoded from the same categorical variable as the target are
    never candidates. Members come back ordered by descending score.
    """
    if cfg.method not in ("MI", "DC"):
        raise ValueError(f"select_filter handles MI and DC, not {cfg.method}")
    if d.constant[j]:
        return RelevantSet(j, (), cfg.method)
    pool = [i for i in _candidates(d, j) if i not in d.siblings(j)]
    if cfg.method == "MI":
        scores = [mutual_information(d, j, i, cfg.mi_bins) for i in pool]
    else:
        scores = [distance_correlation(d, j, i) for i in pool]
    keep = threshold_select(scores, cfg.slope_threshold)
    if cfg.max_set_size is not None:
        keep = keep[:cfg.max_set_size]
    return RelevantSet(j, tuple(pool[k] for k in keep), cfg.method, tuple(scores[k] for k in keep))


def select_one(d: Dataset, j: int, cfg: SelectorConfig, test: Optional[CorrelationCITest] = None) -> RelevantSet:
    if cfg.method == "FBED":
        return select_fbed(d, j, cfg, test)
    if cfg.method == "IAMB":
        return select_iamb(d, j, cfg, test)
    return select_filter(d, j, cfg)


def select_all(d: Dataset, cfg: SelectorConfig, threads: int = 1) -> list[RelevantSet]:
    """Relevant set for every variable, in variable order regardless of ``threads``."""
    test = CorrelationCITest(d.values, cfg.alpha) if cfg.method in ("FBED", "IAMB") else None
    work: Callable[[int], RelevantSet] = lambda j: select_one(d, j, cfg, test)
    if threads <= 1:
        return [work(j) for j in range(d.m)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(d.m)))


def average_set_size(sets: Sequence[RelevantSet]) -> float:
    return float(np.mean([len(s) for s in sets])) if sets else 0.0
