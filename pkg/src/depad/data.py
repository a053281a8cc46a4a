"""Dataset container, CSV ingestion with 1-of-l encoding, and benchmark sampling."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from depad._io import atomic_write_text

LABEL_COLUMN = "__label__"
NORMAL, ANOMALY = "normal", "anomaly"

_MISSING_TOKENS = {"", "na", "nan", "null", "none", "?"}


class IngestError(ValueError):
    """Raised when a CSV file cannot be turned into a valid Dataset."""


class ConstantColumnWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EncodedColumn:
    name: str
    levels: tuple[str, ...]
    start: int
    stop: int


@dataclass(frozen=True)
class EncodingMap:
    """Categorical columns and the block of binary columns each expanded into."""

    columns: tuple[EncodedColumn, ...] = ()

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def __getitem__(self, name: str) -> EncodedColumn:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def group_of(self, j: int) -> Optional[range]:
        for c in self.columns:
            if c.start <= j < c.stop:
                return range(c.start, c.stop)
        return None

    def decode(self, row: np.ndarray) -> dict[str, str]:
        """Recover the original level of every categorical column from an encoded row."""
        row = np.asarray(row)
        return {c.name: c.levels[int(np.argmax(row[c.start:c.stop]))] for c in self.columns}

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "columns": [
                {"name": c.name, "levels": list(c.levels), "start": c.start, "stop": c.stop}
                for c in self.columns
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EncodingMap":
        return cls(tuple(
            EncodedColumn(c["name"], tuple(c["levels"]), int(c["start"]), int(c["stop"]))
            for c in doc.get("columns", [])
        ))


@dataclass(frozen=True)
class BenchmarkSpec:
    anomaly_fraction: float = 0.01
    repeats: int = 20
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.anomaly_fraction < 0.5:
            raise ValueError(f"anomaly_fraction must lie in (0, 0.5), got {self.anomaly_fraction}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable numeric data matrix of n objects by m variables.

    ``labels`` is a boolean vector with True marking an anomaly. ``constant``
    flags zero-variance columns; they are kept so variable indices stay aligned
    with the input.
    """

    values: np.ndarray
    var_names: tuple[str, ...]
    labels: Optional[np.ndarray] = None
    object_ids: Optional[tuple[str, ...]] = None
    source: Optional[str] = None
    encoding: EncodingMap = field(default_factory=EncodingMap)
    constant: tuple[bool, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float, order="F", copy=True)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d matrix")
        n, m = values.shape
        if n < 1 or m < 2:
            raise ValueError(f"need n >= 1 and m >= 2, got n={n}, m={m}")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        names = tuple(str(v) for v in self.var_names)
        if len(names) != m:
            raise ValueError(f"{len(names)} variable names for {m} columns")
        if len(set(names)) != m:
            raise ValueError("variable names must be unique")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "var_names", names)

        if self.labels is not None:
            labels = np.array(self.labels, dtype=bool)
            if labels.shape != (n,):
                raise ValueError(f"labels must have length {n}")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
        if self.object_ids is None:
            object.__setattr__(self, "object_ids", tuple(str(i) for i in range(n)))
        else:
            ids = tuple(str(v) for v in self.object_ids)
            if len(ids) != n:
                raise ValueError(f"object_ids must have length {n}")
            object.__setattr__(self, "object_ids", ids)
        if not self.constant:
            flags = tuple(bool(np.ptp(values[:, j]) == 0) for j in range(m))
            object.__setattr__(self, "constant", flags)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def index_of(self, name: str) -> int:
        return self.var_names.index(name)

    def siblings(self, j: int) -> set[int]:
        """Other binary columns produced from the same categorical variable as ``j``."""
        group = self.encoding.group_of(j)
        return set() if group is None else set(group) - {j}

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(
            values=self.values[rows],
            var_names=self.var_names,
            labels=None if self.labels is None else self.labels[rows],
            object_ids=tuple(self.object_ids[i] for i in rows),
            source=self.source,
            encoding=self.encoding,
        )

    def with_values(self, values: np.ndarray) -> "Dataset":
        return Dataset(values, self.var_names, self.labels, self.object_ids, self.source, self.encoding)


def _parse_float(text: str) -> Optional[float]:
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def ingest_csv(
    path,
    label_column: Optional[str] = None,
    normal_labels: Optional[Iterable[str]] = None,
    *,
    id_column: Optional[str] = None,
    drop_columns: Iterable[str] = (),
    numeric_columns: Optional[Iterable[str]] = None,
    delimiter: str = ",",
) -> Dataset:
    """Read a delimited text file with a header row into a :class:`Dataset`.

    Columns whose every value parses as a finite number are numeric; any other
    column is 1-of-l encoded into one binary column per distinct level (levels
    in order of first appearance). Columns listed in ``numeric_columns`` must
    parse as numbers, otherwise :class:`IngestError` is raised.

    When ``label_column`` is given it is removed from the features and a row is
    labelled normal iff its value is in ``normal_labels``. With no
    ``normal_labels`` the most frequent value is treated as normal.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh, delimiter=delimiter))
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise IngestError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    body = [[cell.strip() for cell in r] for r in rows[1:]]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")
    if len(set(header)) != len(header):
        raise IngestError(f"{path}: duplicate column names in header")

    columns = {h: [r[k] for r in body] for k, h in enumerate(header)}
    for name in [label_column, id_column, *drop_columns]:
        if name is not None and name not in columns:
            raise IngestError(f"{path}: column {name!r} not found")

    labels = None
    if label_column is not None:
        raw = columns[label_column]
        if any(v == "" for v in raw):
            raise IngestError(f"{path}: empty value in label column {label_column!r}")
        if normal_labels is None:
            levels, counts = np.unique(raw, return_counts=True)
            normal = {str(levels[np.argmax(counts)])}
        else:
            normal = {str(v) for v in normal_labels}
        labels = np.array([v not in normal for v in raw], dtype=bool)

    object_ids = tuple(columns[id_column]) if id_column is not None else None
    skip = {label_column, id_column, *drop_columns}
    declared = set(numeric_columns or ())

    blocks: list[np.ndarray] = []
    names: list[str] = []
    encoded: list[EncodedColumn] = []
    for name in header:
        if name in skip:
            continue
        cells = columns[name]
        missing = [i for i, v in enumerate(cells) if v.lower() in _MISSING_TOKENS]
        if missing:
            raise IngestError(f"{path}: missing value in column {name!r} (row {missing[0] + 2})")
        parsed = [_parse_float(v) for v in cells]
        if all(v is not None for v in parsed):
            blocks.append(np.array(parsed, dtype=float)[:, None])
            names.append(name)
            continue
        if name in declared:
            bad = next(i for i, v in enumerate(parsed) if v is None)
            raise IngestError(f"{path}: non-numeric value {cells[bad]!r} in numeric column {name!r}")
        levels = list(dict.fromkeys(cells))
        lookup = {lv: k for k, lv in enumerate(levels)}
        onehot = np.zeros((len(cells), len(levels)))
        onehot[np.arange(len(cells)), [lookup[v] for v in cells]] = 1.0
        start = sum(b.shape[1] for b in blocks)
        encoded.append(EncodedColumn(name, tuple(levels), start, start + len(levels)))
        blocks.append(onehot)
        names.extend(f"{name}={lv}" for lv in levels)

    if not blocks:
        raise IngestError(f"{path}: no feature columns")
    values = np.hstack(blocks)
    if values.shape[1] < 2:
        raise IngestError(f"{path}: need at least two feature columns")
    try:
        d = Dataset(values, tuple(names), labels, object_ids, str(path), EncodingMap(tuple(encoded)))
    except ValueError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    flagged = [d.var_names[j] for j in range(d.m) if d.constant[j]]
    if flagged:
        warnings.warn(f"constant columns retained and flagged: {', '.join(flagged)}", ConstantColumnWarning)
    return d


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def anomaly_sample_size(n: int, fraction: float) -> int:
    return max(1, _round_half_up(fraction * n))


def sample_benchmark(d: Dataset, spec: BenchmarkSpec) -> list[Dataset]:
    """Build contaminated benchmark datasets from a labelled dataset.

    If anomalies make up more than ``spec.anomaly_fraction`` of the objects,
    each of ``spec.repeats`` outputs holds every normal object plus
    k = round(fraction * n) anomalies drawn without replacement (independent
    draws per repeat). Otherwise the dataset is returned unmodified, once.
    Row order of the original dataset is preserved.
    """
    if d.labels is None:
        raise ValueError("sample_benchmark needs a labelled dataset")
    anomalies = np.flatnonzero(d.labels)
    normals = np.flatnonzero(~d.labels)
    if len(anomalies) == 0 or len(normals) == 0:
        raise ValueError("both the normal and the anomaly class must be non-empty")
    if len(anomalies) / d.n <= spec.anomaly_fraction:
        return [d]
    k = anomaly_sample_size(d.n, spec.anomaly_fraction)
    assert k <= len(anomalies)
    out = []
    for r in range(spec.repeats):
        rng = np.random.default_rng(np.random.SeedSequence([spec.rng_seed, r]))
        picked = rng.choice(anomalies, size=k, replace=False)
        out.append(d.subset(np.sort(np.concatenate([normals, picked]))))
    return out


def column_stats(d, j: int) -> tuple[float, float, float, float]:
    """(mean, variance, median, aad) of column ``j``.

    Variance uses the n-1 denominator (0 for a single row). ``aad`` is the mean
    absolute deviation from the median.
    """
    x = d.column(j) if isinstance(d, Dataset) else np.asarray(d, dtype=float)[:, j]
    med = float(np.median(x))
    var = float(np.var(x, ddof=1)) if len(x) > 1 else 0.0
    return float(np.mean(x)), var, med, float(np.mean(np.abs(x - med)))


def write_csv(d: Dataset, path, *, include_ids: bool = False) -> None:
    """Write ``d`` back to CSV, with a ``__label__`` column when labels exist."""
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = (["object_id"] if include_ids else []) + list(d.var_names)
    if d.labels is not None:
        head.append(LABEL_COLUMN)
    w.writerow(head)
    for i in range(d.n):
        row = ([d.object_ids[i]] if include_ids else []) + [repr(float(v)) for v in d.values[i]]
        if d.labels is not None:
            row.append(ANOMALY if d.labels[i] else NORMAL)
        w.writerow(row)
    atomic_write_text(path, buf.getvalue())
    if d.encoding.columns:
        atomic_write_text(Path(str(path) + ".encoding.json"), json.dumps(d.encoding.to_dict(), indent=2))
