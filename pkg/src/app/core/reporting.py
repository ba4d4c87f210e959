"""
Report files.

``emit_reports`` writes four CSV tables (performance, covariates, confidence,
timing) and ``report.json``. Table headers are fixed, so a report without
models still yields headers-only CSVs. Non-finite numbers are written as
empty cells / JSON null.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Sequence

from app.core import metrics
from app.core.errors import DataError
from app.core.experiment import ExperimentReport
from app.core.stats import METRIC_NAMES

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
METRICS_FILE = "metrics.prom"

PERFORMANCE_FIELDS = [
    "model",
    "split",
    *[c for name in METRIC_NAMES for c in (name, f"{name}_ci_low", f"{name}_ci_high")],
    "model_fit_t",
    "model_fit_df",
    "model_fit_p",
    "folds",
    "flags",
]
COVARIATE_FIELDS = [
    "model",
    "feature",
    "index",
    "kind",
    "averaging",
    "coef",
    "se",
    "df",
    "p",
    "rank",
    "probe",
]
CONFIDENCE_FIELDS = [
    "model",
    "split",
    "n",
    "mean_confidence",
    "ties",
    "mean_correct",
    "mean_incorrect",
    "difference",
    "p",
    "n_correct",
    "n_incorrect",
    "applicable",
]
TIMING_FIELDS = [
    "model",
    "train_mean_s",
    "train_std_s",
    "train_total_s",
    "inference_mean_s",
    "inference_std_s",
    "folds",
    "errors",
]

TABLES = {
    "performance.csv": ("performance", PERFORMANCE_FIELDS),
    "covariates.csv": ("covariates", COVARIATE_FIELDS),
    "confidence.csv": ("confidence", CONFIDENCE_FIELDS),
    "timing.csv": ("timing", TIMING_FIELDS),
}


def clean_json(value: Any) -> Any:
    """Replace NaN/inf by None and tuples by lists, recursively."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: clean_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean_json(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        return clean_json(value.item())
    return value


def report_json(report: ExperimentReport) -> str:
    return json.dumps(
        clean_json(report.to_dict()), indent=2, sort_keys=True, allow_nan=False
    )


def write_table(
    path: Path, rows: Sequence[Dict[str, Any]], fieldnames: List[str]
) -> Path:
    try:
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore")
            w.writeheader()
            for row in rows:
                w.writerow({k: ("" if v is None else v) for k, v in clean_json(row).items()})
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    return path


def emit_reports(report: ExperimentReport, out_dir: str | Path) -> Dict[str, Path]:
    """Write every table and ``report.json`` under ``out_dir``; returns the paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out_dir}: {e}") from e
    written: Dict[str, Path] = {}
    for name, (attr, fields) in TABLES.items():
        written[name] = write_table(out_dir / name, getattr(report, attr), fields)
    json_path = out_dir / REPORT_JSON
    try:
        json_path.write_text(report_json(report), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write {json_path}: {e}") from e
    written[REPORT_JSON] = json_path
    prom = metrics.write_metrics(out_dir / METRICS_FILE)
    if prom is not None:
        written[METRICS_FILE] = prom
    logger.info(f"reports written to {out_dir}")
    return written


def _parse_cell(text: str) -> Any:
    if text == "":
        return None
    if text in ("True", "False"):
        return text == "True"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_table(path: str | Path) -> List[Dict[str, Any]]:
    """Load a report CSV back as typed rows (empty cells become None)."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as f:
            return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(f)]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
