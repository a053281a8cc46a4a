"""Two-phase dependency-based anomaly detection.

Phase 1 selects relevant variables for every variable and trains a model
predicting it from them. Phase 2 measures how far each observed value sits
from its prediction, normalizes those deviations per variable with a robust
Z-score, and combines them into one anomaly score per object.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from depad.data import Dataset
from depad.regression import MODEL_KINDS, Predictor, TreeParams, fit_predictor
from depad.selection import RelevantSet, SelectorConfig, select_all

COMBINERS = ("RZPS", "PS", "SUM", "MAX", "GS")

# display acronyms for instantiation names
_MODEL_ACRONYM = {"CART": "CART", "MCART": "mCART", "OLS": "Linear", "RIDGE": "Ridge", "LASSO": "Lasso"}
_COMBINER_ACRONYM = {"RZPS": "RZPS", "PS": "PS", "SUM": "Sum", "MAX": "Max", "GS": "GS"}

_MODEL_ALIASES = {"LINEAR": "OLS", "LR": "OLS"}


def canonical_model(kind: str) -> str:
    k = kind.upper()
    k = _MODEL_ALIASES.get(k, k)
    if k not in MODEL_KINDS:
        raise ValueError(f"unknown model {kind!r}; expected one of CART, mCART, OLS (Linear), Ridge, Lasso")
    return k


def canonical_combiner(name: str) -> str:
    c = name.upper()
    if c not in COMBINERS:
        raise ValueError(f"unknown combiner {name!r}; expected one of {', '.join(_COMBINER_ACRONYM.values())}")
    return c


@dataclass(frozen=True)
class PipelineConfig:
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    model_kind: str = "CART"
    combiner: str = "PS"
    eta: float = 0.0
    seed: int = 0
    threads: int = 1
    n_trees: int = 25
    tree_params: TreeParams = field(default_factory=TreeParams)
    cv_folds: int = 10

    def __post_init__(self):
        object.__setattr__(self, "model_kind", canonical_model(self.model_kind))
        object.__setattr__(self, "combiner", canonical_combiner(self.combiner))
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not math.isfinite(self.eta):
            raise ValueError("eta must be finite")

    @property
    def instantiation_name(self) -> str:
        return "-".join((self.selector.method, _MODEL_ACRONYM[self.model_kind], _COMBINER_ACRONYM[self.combiner]))

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "PipelineConfig":
        """Build a config from an instantiation name such as ``FBED-CART-PS``."""
        parts = name.split("-")
        if len(parts) != 3:
            raise ValueError(f"instantiation name must look like SELECTOR-MODEL-COMBINER, got {name!r}")
        sel, model, comb = parts
        selector = kwargs.pop("selector", None) or SelectorConfig(sel)
        if selector.method != sel.upper():
            selector = replace(selector, method=sel.upper())
        return cls(selector=selector, model_kind=model, combiner=comb, **kwargs)

    def to_dict(self) -> dict:
        return {
            "instantiation": self.instantiation_name,
            "selector": {
                "method": self.selector.method,
                "alpha": self.selector.alpha,
                "slope_threshold": self.selector.slope_threshold,
                "max_set_size": self.selector.max_set_size,
                "fbed_k": self.selector.fbed_k,
                "mi_bins": self.selector.mi_bins,
            },
            "model": _MODEL_ACRONYM[self.model_kind],
            "combiner": _COMBINER_ACRONYM[self.combiner],
            "eta": self.eta,
            "seed": self.seed,
            "n_trees": self.n_trees,
            "tree_params": vars(self.tree_params).copy(),
            "cv_folds": self.cv_folds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        return cls(
            selector=SelectorConfig(**doc["selector"]),
            model_kind=doc["model"],
            combiner=doc["combiner"],
            eta=doc["eta"],
            seed=doc["seed"],
            n_trees=doc["n_trees"],
            tree_params=TreeParams(**doc["tree_params"]),
            cv_folds=doc["cv_folds"],
        )


@dataclass(eq=False)
class DependencyModelSet:
    var_names: tuple
    relevant_sets: list
    predictors: list

    @property
    def m(self) -> int:
        return len(self.predictors)

    def average_set_size(self) -> float:
        return float(np.mean([len(s) for s in self.relevant_sets])) if self.relevant_sets else 0.0

    def expected(self, X: np.ndarray) -> np.ndarray:
        """Predicted value of every variable for every row of ``X``."""
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        for p in self.predictors:
            out[:, p.target] = p.predict_matrix(X)
        return out

    def to_dict(self) -> dict:
        return {"var_names": list(self.var_names), "predictors": [p.to_dict() for p in self.predictors]}

    @classmethod
    def from_dict(cls, doc: dict, relevant_sets: Optional[list] = None) -> "DependencyModelSet":
        predictors = [Predictor.from_dict(p) for p in doc["predictors"]]
        if relevant_sets is None:
            relevant_sets = [RelevantSet(p.target, p.members, "?") for p in predictors]
        return cls(tuple(doc["var_names"]), relevant_sets, predictors)


def train(d: Dataset, cfg: PipelineConfig = PipelineConfig()) -> DependencyModelSet:
    """Phase 1: relevant-variable selection and one predictor per variable.

    The predictor of variable j draws its bootstrap streams from ``(seed, j)``,
    so models do not depend on ``cfg.threads``.
    """
    sets = select_all(d, cfg.selector, threads=cfg.threads)
    X = d.values

    def fit(j: int) -> Predictor:
        return fit_predictor(X, j, sets[j].members, cfg.model_kind, seed=(cfg.seed, j),
                             n_trees=cfg.n_trees, params=cfg.tree_params, cv_folds=cfg.cv_folds)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            predictors = list(pool.map(fit, range(d.m)))
    else:
        predictors = [fit(j) for j in range(d.m)]
    return DependencyModelSet(tuple(d.var_names), sets, predictors)


@dataclass(eq=False)
class DeviationMatrix:
    raw: np.ndarray
    normalized: np.ndarray
    expected: np.ndarray
    medians: np.ndarray
    aads: np.ndarray
    degenerate: np.ndarray

    @property
    def per_variable_stats(self) -> list[tuple[float, float]]:
        return list(zip(self.medians.tolist(), self.aads.tolist()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape


def robust_z(raw: np.ndarray, scale_hint: Optional[np.ndarray] = None):
    """Column-wise (x - median) / AAD, AAD being the mean absolute deviation from the median.

    Columns whose AAD is zero (or negligible next to ``scale_hint``) are
    degenerate and normalize to all zeros. Returns
    ``(normalized, medians, aads, degenerate)``.
    """
    raw = np.asarray(raw, dtype=float)
    med = np.median(raw, axis=0)
    # sorted before averaging so the result ignores row order bit for bit
    aad = np.mean(np.sort(np.abs(raw - med), axis=0), axis=0)
    floor = 0.0 if scale_hint is None else 1e-12 * np.maximum(1.0, scale_hint)
    degenerate = aad <= floor
    norm = np.zeros_like(raw)
    ok = ~degenerate
    norm[:, ok] = (raw[:, ok] - med[ok]) / aad[ok]
    return norm, med, aad, degenerate


def normalize(raw: np.ndarray) -> DeviationMatrix:
    """Wrap a raw deviation matrix (no expectations known) with its robust Z-scores."""
    raw = np.asarray(raw, dtype=float)
    norm, med, aad, deg = robust_z(raw)
    return DeviationMatrix(raw, norm, np.full_like(raw, np.nan), med, aad, deg)


def deviations(d: Dataset, models: DependencyModelSet) -> DeviationMatrix:
    """Phase 2a: absolute prediction errors and their robust Z-score normalization."""
    if tuple(d.var_names) != tuple(models.var_names):
        raise ValueError("dataset schema does not match the trained models")
    X = d.values
    expected = models.expected(X)
    raw = np.abs(X - expected)
    scale = np.max(np.abs(X), axis=0) if len(X) else None
    norm, med, aad, deg = robust_z(raw, scale)
    return DeviationMatrix(raw, norm, expected, med, aad, deg)


@dataclass(eq=False)
class ScoreVector:
    scores: np.ndarray
    combiner: str
    eta: float = 0.0

    def __len__(self) -> int:
        return len(self.scores)

    def ranks(self) -> np.ndarray:
        """1-based rank of every object, highest score first, ties broken by object index."""
        order = self.order()
        r = np.empty(len(order), dtype=int)
        r[order] = np.arange(1, len(order) + 1)
        return r

    def order(self) -> np.ndarray:
        return np.lexsort((np.arange(len(self.scores)), -self.scores))

    def top(self, k: int) -> np.ndarray:
        return self.order()[:k]


def combine(dev, combiner: str = "PS", eta: float = 0.0) -> ScoreVector:
    """Phase 2b: collapse normalized deviations into one score per object.

    PS and RZPS add the normalized deviations above ``eta``; Sum adds all of
    them; Max takes the largest; GS maps Sum scores through
    ``max(0, erf((s - mean) / (std * sqrt 2)))``. Degenerate columns are
    left out, so they never affect a score.
    """
    combiner = canonical_combiner(combiner)
    if isinstance(dev, DeviationMatrix):
        Z, keep = dev.normalized, ~dev.degenerate
    else:
        Z = np.asarray(dev, dtype=float)
        keep = np.ones(Z.shape[1], dtype=bool)
    Z = Z[:, keep]
    n = Z.shape[0]
    if Z.shape[1] == 0:
        return ScoreVector(np.zeros(n), combiner, eta)
    # row sums are correctly rounded, so scores do not depend on summation order
    if combiner in ("PS", "RZPS"):
        s = np.array([math.fsum(row[row > eta]) for row in Z])
    elif combiner == "MAX":
        s = Z.max(axis=1)
    else:
        s = np.array([math.fsum(row) for row in Z])
        if combiner == "GS":
            s = gaussian_scaling(s)
    return ScoreVector(s, combiner, eta)


def gaussian_scaling(s) -> np.ndarray:
    """``max(0, erf((s - mean) / (std * sqrt 2)))`` with the population standard deviation."""
    s = [float(v) for v in s]
    n = len(s)
    if n == 0:
        return np.zeros(0)
    mu = math.fsum(s) / n
    sd = math.sqrt(math.fsum((v - mu) ** 2 for v in s) / n)
    if sd <= 0:
        return np.zeros(n)
    return np.array([max(0.0, math.erf((v - mu) / (sd * math.sqrt(2.0)))) for v in s])


@dataclass(eq=False)
class DetectionResult:
    config: PipelineConfig
    models: DependencyModelSet
    deviations: DeviationMatrix
    scores: ScoreVector


def detect(d: Dataset, cfg: PipelineConfig = PipelineConfig(), score_on: Optional[Dataset] = None) -> DetectionResult:
    """Train on ``d`` and score ``score_on`` (default: ``d`` itself, the unsupervised setting)."""
    models = train(d, cfg)
    target = d if score_on is None else score_on
    dev = deviations(target, models)
    return DetectionResult(cfg, models, dev, combine(dev, cfg.combiner, cfg.eta))


def run(d: Dataset, cfg: PipelineConfig = PipelineConfig()) -> ScoreVector:
    return detect(d, cfg).scores


@dataclass(frozen=True)
class ExplainEntry:
    variable: str
    index: int
    deviation: float
    observed: float
    expected: float
    relevant: tuple  # ((name, observed value), ...)
    normal_pattern: Optional[str] = None
    normal_share: Optional[float] = None
    observed_pattern: Optional[str] = None
    observed_share: Optional[float] = None


@dataclass(frozen=True)
class ExplainReport:
    object_index: int
    object_id: str
    score: float
    rank: int
    entries: tuple

    def to_dict(self) -> dict:
        return {
            "object_index": self.object_index,
            "object_id": self.object_id,
            "score": self.score,
            "rank": self.rank,
            "variables": [vars(e).copy() | {"relevant": [list(r) for r in e.relevant]} for e in self.entries],
        }

    def to_text(self) -> str:
        rows = [("variable", "dev", "observed", "expected", "normal pattern (%)", "observed pattern (%)")]
        for e in self.entries:
            normal = "" if e.normal_pattern is None else f"{e.normal_pattern} ({100 * e.normal_share:.1f}%)"
            seen = "" if e.observed_pattern is None else f"{e.observed_pattern} ({100 * e.observed_share:.1f}%)"
            rows.append((e.variable, f"{e.deviation:.2f}", _fmt(e.observed), _fmt(e.expected), normal, seen))
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = [f"object {self.object_id} (rank {self.rank}, score {self.score:.4g})"]
        for k, r in enumerate(rows):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return f"{v:.4g}" if v != int(v) else str(int(v))


def _is_discrete(col: np.ndarray, limit: int = 10) -> bool:
    return len(np.unique(col)) <= limit


def _pattern(d: Dataset, j: int, rel: int, i: int, expected: float):
    """Dependency patterns between variable j and its most relevant variable for object i."""
    x, r = d.values[:, j], d.values[:, rel]
    if not (_is_discrete(x) and _is_discrete(r)):
        return None, None, None, None
    levels = np.unique(x)
    normal = levels[np.argmin(np.abs(levels - expected))]
    rv, xv = r[i], x[i]
    same_r = r == rv
    rn, jn = d.var_names[rel], d.var_names[j]
    return (f"{rn}={_fmt(rv)} -> {jn}={_fmt(normal)}", float(np.mean(same_r & (x == normal))),
            f"{rn}={_fmt(rv)} -> {jn}={_fmt(xv)}", float(np.mean(same_r & (x == xv))))


def explain(d: Dataset, models: DependencyModelSet, dev: DeviationMatrix, i: int, top_k: int = 3,
            scores: Optional[ScoreVector] = None) -> ExplainReport:
    """The ``top_k`` variables with the largest normalized deviation for object ``i``.

    Ties in deviation go to the lower variable index. For discrete variables
    the report also gives the expected and observed dependency pattern against
    the most relevant variable, with the share of objects showing each.
    """
    if not 0 <= i < d.n:
        raise IndexError(f"object index {i} out of range for {d.n} objects")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    row = dev.normalized[i]
    order = np.lexsort((np.arange(d.m), -row))[: min(top_k, d.m)]
    entries = []
    for j in order:
        members = models.relevant_sets[j].members
        rel = tuple((d.var_names[v], float(d.values[i, v])) for v in members)
        pat = _pattern(d, j, members[0], i, float(dev.expected[i, j])) if members else (None,) * 4
        entries.append(ExplainEntry(d.var_names[j], int(j), float(row[j]), float(d.values[i, j]),
                                    float(dev.expected[i, j]), rel, *pat))
    if scores is None:
        score, rank = float("nan"), 0
    else:
        score, rank = float(scores.scores[i]), int(scores.ranks()[i])
    return ExplainReport(i, str(d.object_ids[i]), score, rank, tuple(entries))
