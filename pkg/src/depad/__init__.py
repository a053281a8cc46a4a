"""Dependency-based anomaly detection.

An object is anomalous when its values break the dependencies that hold
between variables in the rest of the data: every variable is predicted from
its relevant variables, and large, normalized prediction errors add up to the
object's anomaly score.
"""

__version__ = "0.1.0"

from depad.data import BenchmarkSpec, Dataset, IngestError, ingest_csv, sample_benchmark  # noqa: E402
from depad.engine import PipelineConfig, combine, deviations, detect, explain, run, train  # noqa: E402
from depad.evaluation import BaselineConfig, average_precision, baseline_score, roc_auc, run_benchmark  # noqa: E402
from depad.selection import SelectorConfig, select_all  # noqa: E402

__all__ = [
    "BaselineConfig", "BenchmarkSpec", "Dataset", "IngestError", "PipelineConfig", "SelectorConfig",
    "average_precision", "baseline_score", "combine", "detect", "deviations", "explain", "ingest_csv",
    "roc_auc", "run", "run_benchmark", "sample_benchmark", "select_all", "train",
]
