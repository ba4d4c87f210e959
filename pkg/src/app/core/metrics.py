"""Prometheus metrics plumbing (opt-in).

When METRICS_ENABLED=false, this module should not register collectors.
With metrics on, an experiment run leaves a textfile exposition next to its
reports.
"""

from __future__ import annotations

import logging
from pathlib import Path

from prometheus_client import (
    CollectorRegistry,
    Counter,
    Histogram,
    write_to_textfile,
)

from app.core.config import settings

logger = logging.getLogger(__name__)

_registry: CollectorRegistry | None = None
_c_models: Counter | None = None
_c_failures: Counter | None = None
_h_train_seconds: Histogram | None = None
_h_inference_seconds: Histogram | None = None


def _buckets() -> list[float]:
    try:
        return [float(x) for x in (settings.METRICS_BUCKETS or "").split(",") if x]
    except ValueError:
        return [0.01, 0.05, 0.1, 0.5, 1, 2, 5, 10, 30, 60, 120, 300]


def enabled() -> bool:
    return settings.METRICS_ENABLED and _registry is not None


def init_metrics() -> None:
    global _registry, _c_models, _c_failures, _h_train_seconds, _h_inference_seconds
    if not settings.METRICS_ENABLED:
        return
    if _registry is not None:
        return  # avoid duplicate collectors on re-entry
    _registry = CollectorRegistry()
    ns = settings.METRICS_NAMESPACE
    buckets = _buckets()
    _c_models = Counter(
        f"{ns}_models_trained_total",
        "Models fitted, per backend kind",
        labelnames=("kind",),
        registry=_registry,
    )
    _c_failures = Counter(
        f"{ns}_model_failures_total",
        "Models that failed to train or evaluate",
        labelnames=("kind",),
        registry=_registry,
    )
    _h_train_seconds = Histogram(
        f"{ns}_train_seconds",
        "Per-fold training duration",
        labelnames=("kind",),
        buckets=buckets,
        registry=_registry,
    )
    _h_inference_seconds = Histogram(
        f"{ns}_inference_seconds",
        "Per-fold posterior inference duration",
        labelnames=("kind",),
        buckets=buckets,
        registry=_registry,
    )


def observe_training(kind: str, seconds: float) -> None:
    if not enabled():
        return
    _c_models.labels(kind=kind).inc()
    _h_train_seconds.labels(kind=kind).observe(max(seconds, 0.0))


def observe_inference(kind: str, seconds: float) -> None:
    if not enabled():
        return
    _h_inference_seconds.labels(kind=kind).observe(max(seconds, 0.0))


def count_failure(kind: str) -> None:
    if not enabled():
        return
    _c_failures.labels(kind=kind).inc()


def write_metrics(path: str | Path) -> Path | None:
    """Write the textfile exposition; no-op (None) when metrics are off."""
    if not enabled():
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), _registry)
    logger.info(f"metrics written to {path}")
    return path
