"""Seeded synthetic datasets with known structure, plus the bundled Zoo data."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from depad.data import Dataset, ingest_csv


def zoo_csv_path() -> Path:
    """Path of the bundled Zoo CSV (101 animals, 16 attributes, ``name`` and ``type`` columns)."""
    return Path(str(resources.files("depad") / "data_files" / "zoo.csv"))


def load_zoo() -> Dataset:
    return ingest_csv(zoo_csv_path(), id_column="name", drop_columns=["type"])


def growth_curve(age, lo: float = 18.0, tau: float = 6.0, slope: float = 0.2):
    """Weight (kg) by age (years): fast gain that levels off into a gentle rise."""
    age = np.asarray(age, dtype=float)
    return 50.0 + 25.0 * (1.0 - np.exp(-(age - lo) / tau)) + slope * (age - lo)


@dataclass(frozen=True)
class AgeWeightSample:
    dataset: Dataset
    extreme: int  # on-curve object far beyond the observed ages
    planted: tuple  # off-curve objects


def age_weight(seed: int, n: int = 450, n_planted: int = 5, gap: float = 5.0, offset: float = 20.0,
               noise: float = 3.0, lo: float = 18.0, hi: float = 80.0) -> AgeWeightSample:
    """Objects on a nonlinear age/weight curve, one on-curve extreme and a few off-curve objects.

    Ages are uniform on [lo, hi] and recorded in months; weights follow
    :func:`growth_curve` plus Gaussian noise. The extreme object sits ``gap``
    years past ``hi`` exactly on the curve. Planted objects have ordinary ages
    but weights ``offset`` kg above or below the curve.
    """
    rng = np.random.default_rng(seed)
    age = rng.uniform(lo, hi, n)
    weight = growth_curve(age, lo) + rng.normal(0.0, noise, n)
    extreme_age = hi + gap
    planted_age = rng.uniform(lo + 15.0, hi - 5.0, n_planted)
    planted_weight = growth_curve(planted_age, lo) + offset * rng.choice([-1.0, 1.0], n_planted)
    months = np.r_[age, extreme_age, planted_age] * 12.0
    kg = np.r_[weight, growth_curve(extreme_age, lo), planted_weight]
    labels = np.zeros(n + 1 + n_planted, dtype=bool)
    labels[n + 1:] = True
    d = Dataset(np.column_stack([months, kg]), ("age_months", "weight_kg"), labels=labels)
    return AgeWeightSample(d, n, tuple(range(n + 1, n + 1 + n_planted)))


# parent lists of a fixed 10-node DAG with chains, forks and colliders
DAG_PARENTS = {
    0: (),
    1: (),
    2: (0, 1),
    3: (2,),
    4: (3,),
    5: (1,),
    6: (4, 5),
    7: (6,),
    8: (3, 7),
    9: (8,),
}


def markov_blankets(parents: dict) -> dict:
    """Parents, children and the children's other parents of every node."""
    children = {v: {c for c, ps in parents.items() if v in ps} for v in parents}
    blankets = {}
    for v, ps in parents.items():
        mb = set(ps) | children[v]
        for c in children[v]:
            mb |= set(parents[c])
        mb.discard(v)
        blankets[v] = mb
    return blankets


def linear_gaussian(seed: int, n: int = 5000, parents: dict = DAG_PARENTS) -> np.ndarray:
    """Samples of a linear-Gaussian network; edge weights have magnitude in [0.5, 1] and random sign."""
    rng = np.random.default_rng(seed)
    X = np.zeros((n, len(parents)))
    for v in sorted(parents):
        X[:, v] = rng.normal(size=n)
        for p in parents[v]:
            X[:, v] += rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0]) * X[:, p]
    return X


def broken_dependencies(seed: int, n_normal: int = 1000, n_anomalous: int = 100, m: int = 6) -> Dataset:
    """Labeled data whose anomalies keep every marginal but break the dependencies.

    Normal objects follow a chain x_{k+1} = x_k + noise (with a nonlinear
    term); each anomaly has a couple of variables replaced by values drawn from
    their own marginal, independently of the rest of the row.
    """
    rng = np.random.default_rng(seed)
    total = n_normal + n_anomalous
    X = np.zeros((total, m))
    X[:, 0] = rng.normal(size=total)
    for k in range(1, m):
        X[:, k] = 0.9 * X[:, k - 1] + 0.3 * np.sin(2.0 * X[:, k - 1]) + 0.35 * rng.normal(size=total)
    labels = np.zeros(total, dtype=bool)
    labels[n_normal:] = True
    for i in range(n_normal, total):
        for k in rng.choice(m, size=2, replace=False):
            X[i, k] = X[rng.integers(0, n_normal), k]
    return Dataset(X, tuple(f"x{k}" for k in range(m)), labels=labels, source="broken-dependencies")
