"""Command-line front end: ``depad detect | explain | bench | selftest``.

Exit codes: 0 success, 1 selftest failure, 2 bad arguments or unknown object,
3 input that cannot be ingested, 4 labels missing or single-class where
metrics are needed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from depad import __version__
from depad._io import atomic_write_json, atomic_write_text
from depad.data import BenchmarkSpec, Dataset, IngestError, ingest_csv
from depad.engine import (DependencyModelSet, PipelineConfig, ScoreVector, combine, deviations, detect,
                          explain)
from depad.evaluation import (BaselineConfig, average_precision, compare, pvalue_csv, roc_auc,
                              run_benchmark, summary_csv, write_reports)
from depad.regression import TreeParams
from depad.selection import RelevantSet, SelectorConfig

SCHEMA_VERSION = 1

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INGEST, EXIT_LABELS = 0, 1, 2, 3, 4

# defaults for every setting a config file may provide
DEFAULTS = {
    "fs": "fbed",
    "model": "cart",
    "score": "ps",
    "eta": 0.0,
    "alpha": 0.01,
    "slope_threshold": 0.8,
    "max_set_size": None,
    "trees": 25,
    "min_split": 20,
    "min_bucket": 7,
    "cp": 0.003,
    "cv_folds": 10,
    "seed": 0,
    "threads": 1,
    "top": 10,
    "k": 10,
    "repeats": 20,
    "fraction": 0.01,
    "methods": "fbed-cart-ps,fbed-cart-sum,wknn,lof",
    "standard_ap": False,
    "label_column": None,
    "normal_labels": None,
    "id_column": None,
    "drop_columns": None,
    "delimiter": ",",
}

_INGEST_KEYS = ("label_column", "normal_labels", "id_column", "drop_columns", "delimiter")


class UsageError(Exception):
    pass


class LabelError(Exception):
    pass


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="input CSV with a header row")
    p.add_argument("--label-column", dest="label_column", help="column holding class labels (excluded from the features)")
    p.add_argument("--normal-labels", dest="normal_labels",
                   help="comma-separated label values of the normal class (default: the most frequent label)")
    p.add_argument("--id-column", dest="id_column", help="column holding object identifiers")
    p.add_argument("--drop-columns", dest="drop_columns", help="comma-separated columns to ignore")
    p.add_argument("--delimiter", help="field delimiter (default ',')")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with default settings; flags take precedence")
    p.add_argument("--seed", type=int, help="master random seed (fallback: $DEPAD_SEED, then 0)")
    p.add_argument("--threads", type=int, help="worker threads; results do not depend on it")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fs", type=str.lower, choices=["fbed", "iamb", "mi", "dc"], help="relevant-variable selector")
    p.add_argument("--model", type=str.lower, choices=["cart", "mcart", "ols", "linear", "ridge", "lasso"],
                   help="dependency model")
    p.add_argument("--score", type=str.lower, choices=["rzps", "ps", "sum", "max", "gs"], help="score combiner")
    p.add_argument("--eta", type=float, help="PS/RZPS threshold on normalized deviations (default 0)")
    p.add_argument("--alpha", type=float, help="significance level of the independence tests (default 0.01)")
    p.add_argument("--slope-threshold", dest="slope_threshold", type=float,
                   help="MI/DC filters keep scores >= this fraction of the best (default 0.8)")
    p.add_argument("--max-set-size", dest="max_set_size", type=int, help="cap on relevant-set size")
    p.add_argument("--trees", type=int, help="bagged trees per CART model (default 25)")
    p.add_argument("--min-split", dest="min_split", type=int, help=argparse.SUPPRESS)
    p.add_argument("--min-bucket", dest="min_bucket", type=int, help=argparse.SUPPRESS)
    p.add_argument("--cp", type=float, help=argparse.SUPPRESS)
    p.add_argument("--cv-folds", dest="cv_folds", type=int, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depad", description="Dependency-based anomaly detection.")
    parser.add_argument("--version", action="version", version=f"depad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="score every object of a CSV file")
    _add_data_flags(p)
    _add_pipeline_flags(p)
    _add_common(p)
    p.add_argument("--top", type=int, help="rows of the printed top-anomaly table (default 10)")
    p.add_argument("--out", default="depad_run", help="output directory (default ./depad_run)")
    p.add_argument("--standard-ap", dest="standard_ap", action="store_const", const=True,
                   help="report precision@l = hits/l average precision alongside the default")

    p = sub.add_parser("explain", help="variables behind one object's score, from a previous detect run")
    p.add_argument("--run", required=True, help="output directory of a detect run")
    p.add_argument("--object", required=True, dest="object_ref",
                   help="object id, or rank:N for the N-th ranked object")
    p.add_argument("--vars", type=int, default=3, help="number of variables to report (default 3)")
    p.add_argument("--data", help="read the data from here instead of the path recorded in the run")
    p.add_argument("--json", dest="json_out", help="where to write the JSON report (default <run>/explain/<id>.json)")

    p = sub.add_parser("bench", help="repeated-sampling benchmark on a labeled CSV")
    _add_data_flags(p)
    _add_pipeline_flags(p)
    _add_common(p)
    p.add_argument("--methods", help="comma-separated methods, e.g. fbed-cart-ps,iamb-lasso-sum,wknn,lof,random")
    p.add_argument("--repeats", type=int, help="benchmark samples per method (default 20)")
    p.add_argument("--fraction", type=float, help="anomaly fraction (default 0.01); when the data holds more anomalies than this, "
                        "each sample keeps every normal object plus round(fraction x all objects) anomalies, "
                        "otherwise the data is used once as is")
    p.add_argument("--k", type=int, help="neighbours for wkNN and LOF (default 10)")
    p.add_argument("--out", default="depad_bench", help="output directory (default ./depad_bench)")
    p.add_argument("--standard-ap", dest="standard_ap", action="store_const", const=True,
                   help="use precision@l = hits/l inside average precision")

    p = sub.add_parser("selftest", help="run the built-in acceptance suite")
    p.add_argument("--list", action="store_true", help="list the criteria without running them")
    p.add_argument("--only", help="comma-separated criterion numbers to run")
    p.add_argument("--inject-failure", dest="inject_failure", type=int, help=argparse.SUPPRESS)
    return parser


def load_config(path: Optional[str], command: str) -> dict:
    """Flat keys plus an optional table named after the subcommand, e.g. ``[detect]``."""
    if not path:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    merged = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    merged.update(doc.get(command, {}))
    out = {}
    for key, value in merged.items():
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r} in {path}")
        out[key] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Settings with precedence flags > config file > $DEPAD_SEED (seed only) > defaults."""
    config = load_config(getattr(args, "config", None), args.command)
    settings = dict(DEFAULTS)
    env_seed = os.environ.get("DEPAD_SEED")
    if env_seed is not None:
        try:
            settings["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"DEPAD_SEED must be an integer, got {env_seed!r}")
    settings.update(config)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _split(value) -> Optional[list]:
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def ingest_options(s: dict) -> dict:
    return {
        "label_column": s["label_column"],
        "normal_labels": _split(s["normal_labels"]),
        "id_column": s["id_column"],
        "drop_columns": _split(s["drop_columns"]) or (),
        "delimiter": s["delimiter"],
    }


def load_dataset(path: str, options: dict) -> Dataset:
    try:
        return ingest_csv(path, **options)
    except FileNotFoundError as exc:
        raise IngestError(f"no such file: {path}") from exc
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc


def pipeline_config(s: dict) -> PipelineConfig:
    if s["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    if s["trees"] < 1:
        raise UsageError("--trees must be >= 1")
    try:
        selector = SelectorConfig(s["fs"], alpha=s["alpha"], slope_threshold=s["slope_threshold"],
                                  max_set_size=s["max_set_size"])
        return PipelineConfig(selector=selector, model_kind=s["model"], combiner=s["score"], eta=float(s["eta"]),
                              seed=int(s["seed"]), threads=int(s["threads"]), n_trees=int(s["trees"]),
                              tree_params=TreeParams(int(s["min_split"]), int(s["min_bucket"]), float(s["cp"])),
                              cv_folds=int(s["cv_folds"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def scores_csv(d: Dataset, scores: ScoreVector) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["object_id", "score", "rank"])
    ranks = scores.ranks()
    for i in range(d.n):
        w.writerow([d.object_ids[i], repr(float(scores.scores[i])), int(ranks[i])])
    return buf.getvalue()


def complexity_estimate(n: int, m: int, lam: float) -> dict:
    """Operation counts implied by the realized average relevant-set size lambda."""
    lam_eff = max(lam, 1.0)
    return {
        "selection": m * m * lam_eff,
        "training": m * lam_eff * n * math.log2(max(n, 2)),
        "formula": "O(m^2 lambda) + O(m lambda n log n)",
    }


def top_table(d: Dataset, result, k: int, n_vars: int = 3) -> str:
    scores = result.scores
    lines = [f"top {min(k, d.n)} of {d.n} objects by {result.config.instantiation_name}"]
    header = f"{'rank':>4}  {'object':<16} {'score':>10}  top variables (normalized deviation, observed -> expected)"
    lines += [header, "-" * len(header)]
    for i in scores.top(k):
        rep = explain(d, result.models, result.deviations, int(i), n_vars, scores)
        detail = "; ".join(f"{e.variable} {e.deviation:.2f} ({_num(e.observed)} -> {_num(e.expected)})"
                           for e in rep.entries)
        lines.append(f"{rep.rank:>4}  {rep.object_id:<16} {rep.score:>10.4g}  {detail}")
    return "\n".join(lines) + "\n"


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.3g}"


def _relevant_sets_doc(d: Dataset, sets: Sequence[RelevantSet]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "sets": [s.to_dict(d.var_names) for s in sets]}


def cmd_detect(args: argparse.Namespace) -> int:
    s = resolve(args)
    cfg = pipeline_config(s)
    if s["top"] < 0:
        raise UsageError("--top must be >= 0")
    options = ingest_options(s)
    t0 = time.perf_counter()
    d = load_dataset(args.data, options)
    if options["label_column"] is not None and (d.labels.all() or not d.labels.any()):
        raise LabelError(f"label column {options['label_column']!r} holds a single class; metrics need both")
    t1 = time.perf_counter()
    result = detect(d, cfg)
    t2 = time.perf_counter()

    out = Path(args.out)
    atomic_write_text(out / "scores.csv", scores_csv(d, result.scores))
    atomic_write_json(out / "models.json", {"schema_version": SCHEMA_VERSION, **result.models.to_dict()})
    atomic_write_json(out / "relevant_sets.json", _relevant_sets_doc(d, result.models.relevant_sets))
    files = ["scores.csv", "models.json", "relevant_sets.json"]
    if d.labels is not None and options["label_column"] is not None:
        metrics = {
            "schema_version": SCHEMA_VERSION,
            "n_anomalies": int(d.labels.sum()),
            "roc_auc": roc_auc(result.scores.scores, d.labels),
            "ap": average_precision(result.scores.scores, d.labels),
        }
        if s["standard_ap"]:
            metrics["ap_standard"] = average_precision(result.scores.scores, d.labels, standard=True)
        atomic_write_json(out / "metrics.json", metrics)
        files.append("metrics.json")
    lam = result.models.average_set_size()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool": "depad",
        "tool_version": __version__,
        "instantiation": cfg.instantiation_name,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "dataset": {
            "path": str(Path(args.data).resolve()),
            "sha256": file_sha256(args.data),
            "n": d.n,
            "m": d.m,
            "ingest": options,
        },
        "average_relevant_set_size": lam,
        "complexity_estimate": complexity_estimate(d.n, d.m, lam),
        "timings_seconds": {"ingest": t1 - t0, "detect": t2 - t1},
        "files": files,
    }
    atomic_write_json(out / "manifest.json", manifest)
    if s["top"]:
        sys.stdout.write(top_table(d, result, s["top"]))
    if "metrics.json" in files:
        sys.stdout.write(f"ROC AUC {metrics['roc_auc']:.4f}  AP {metrics['ap']:.4f}\n")
    sys.stdout.write(f"wrote {', '.join(files + ['manifest.json'])} to {out}\n")
    return EXIT_OK


def _read_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"{path} not found; is --run the output directory of a detect run?") from exc


def resolve_object(d: Dataset, scores: ScoreVector, ref: str) -> int:
    if ref in d.object_ids:
        return d.object_ids.index(ref)
    if ref.lower().startswith("rank:"):
        try:
            r = int(ref[5:])
        except ValueError:
            raise UsageError(f"bad rank in {ref!r}")
        if not 1 <= r <= d.n:
            raise UsageError(f"rank {r} outside 1..{d.n}")
        return int(scores.top(r)[-1])
    raise UsageError(f"unknown object {ref!r} (use an object id or rank:N)")


def cmd_explain(args: argparse.Namespace) -> int:
    run = Path(args.run)
    manifest = _read_json(run / "manifest.json")
    models_doc = _read_json(run / "models.json")
    sets_doc = _read_json(run / "relevant_sets.json")
    if args.vars < 1:
        raise UsageError("--vars must be >= 1")
    data_path = args.data or manifest["dataset"]["path"]
    d = load_dataset(data_path, manifest["dataset"]["ingest"])
    if tuple(models_doc["var_names"]) != d.var_names:
        raise IngestError(f"{data_path} does not have the variables of the recorded run")
    sets = [RelevantSet.from_dict(doc, d.var_names) for doc in sets_doc["sets"]]
    models = DependencyModelSet.from_dict(models_doc, sets)
    cfg = PipelineConfig.from_dict(manifest["config"])
    dev = deviations(d, models)
    scores = combine(dev, cfg.combiner, cfg.eta)
    i = resolve_object(d, scores, args.object_ref)
    report = explain(d, models, dev, i, min(args.vars, d.m), scores)
    target = Path(args.json_out) if args.json_out else run / "explain" / f"{_safe(report.object_id)}.json"
    atomic_write_json(target, {"schema_version": SCHEMA_VERSION, **report.to_dict()})
    sys.stdout.write(report.to_text())
    sys.stdout.write(f"wrote {target}\n")
    return EXIT_OK


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "object"


def parse_method(name: str, s: dict, base: PipelineConfig):
    key = name.strip().lower()
    if key in ("wknn", "lof", "random"):
        return BaselineConfig(key, int(s["k"]), int(s["seed"]))
    try:
        return PipelineConfig.from_name(name.strip(), selector=replace(base.selector, method=key.split("-")[0].upper()),
                                        eta=base.eta, seed=base.seed, n_trees=base.n_trees,
                                        tree_params=base.tree_params, cv_folds=base.cv_folds)
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad method {name!r}: {exc}") from exc


def cmd_bench(args: argparse.Namespace) -> int:
    s = resolve(args)
    base = pipeline_config(s)
    if int(s["repeats"]) < 1:
        raise UsageError("--repeats must be >= 1")
    if int(s["k"]) < 1:
        raise UsageError("--k must be >= 1")
    try:
        spec = BenchmarkSpec(float(s["fraction"]), int(s["repeats"]), int(s["seed"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    methods = [parse_method(m, s, base) for m in _split(s["methods"]) or []]
    if not methods:
        raise UsageError("--methods is empty")
    options = ingest_options(s)
    if options["label_column"] is None:
        raise LabelError("bench needs --label-column")
    d = load_dataset(args.data, options)
    if d.labels.all() or not d.labels.any():
        raise LabelError("bench needs both normal and anomalous objects")
    reports = run_benchmark(d, methods, spec, threads=base.threads, standard_ap=bool(s["standard_ap"]))
    write_reports(reports, args.out)
    sys.stdout.write(summary_csv(reports))
    sys.stdout.write("rank-sum p-values on ROC AUC (two-sided)\n")
    sys.stdout.write(pvalue_csv(reports, compare(reports)))
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    from depad import acceptance

    if args.list:
        for c in acceptance.CRITERIA:
            sys.stdout.write(f"{c.number}. {c.title} (limit {c.limit:g} s)\n")
        return EXIT_OK
    only = None
    if args.only:
        try:
            only = {int(v) for v in _split(args.only)}
        except ValueError:
            raise UsageError(f"--only takes criterion numbers, got {args.only!r}")
    results = acceptance.run_all(only=only, inject_failure=args.inject_failure)
    for r in results:
        sys.stdout.write(r.line() + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {"detect": cmd_detect, "explain": cmd_explain, "bench": cmd_bench, "selftest": cmd_selftest}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"depad {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except IngestError as exc:
        sys.stderr.write(f"depad {args.command}: cannot ingest input: {exc}\n")
        return EXIT_INGEST
    except LabelError as exc:
        sys.stderr.write(f"depad {args.command}: {exc}\n")
        return EXIT_LABELS


if __name__ == "__main__":
    sys.exit(main())
