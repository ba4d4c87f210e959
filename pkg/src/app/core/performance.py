"""
Wall-clock timing for the training and inference timing table.

Tracks:
- Training time per model and fold
- Inference time per model, fold and split
- Failures per model
"""

import threading
import time
from collections import defaultdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

PHASES = ("train", "inference")


class TimingRecorder:
    """Thread-safe collector of (model, phase) durations in seconds."""

    def __init__(self):
        self._lock = threading.Lock()
        self._times: Dict[Tuple[str, str], List[float]] = defaultdict(list)
        self._errors: Dict[str, int] = defaultdict(int)

    def record(self, model: str, phase: str, seconds: float) -> None:
        """
        Record one duration.

        Args:
            model: Model label (backend and hyperparameter)
            phase: "train" or "inference"
            seconds: Wall-clock duration
        """
        with self._lock:
            self._times[(model, phase)].append(max(float(seconds), 0.0))

    def record_error(self, model: str) -> None:
        with self._lock:
            self._errors[model] += 1

    def samples(self, model: str, phase: str) -> List[float]:
        with self._lock:
            return list(self._times.get((model, phase), []))

    def stats(self, model: str, phase: str) -> Dict[str, Any]:
        """Mean/std/min/max/total seconds for one model and phase."""
        times = self.samples(model, phase)
        if not times:
            return {
                "count": 0,
                "mean_s": 0.0,
                "std_s": 0.0,
                "min_s": 0.0,
                "max_s": 0.0,
                "total_s": 0.0,
            }
        arr = np.asarray(times)
        return {
            "count": int(arr.size),
            "mean_s": round(float(arr.mean()), 6),
            "std_s": round(float(arr.std(ddof=1)) if arr.size > 1 else 0.0, 6),
            "min_s": round(float(arr.min()), 6),
            "max_s": round(float(arr.max()), 6),
            "total_s": round(float(arr.sum()), 6),
        }

    def models(self) -> List[str]:
        with self._lock:
            seen = dict.fromkeys(m for m, _ in self._times)
            seen.update(dict.fromkeys(self._errors))
        return list(seen)

    def rows(self) -> List[Dict[str, Any]]:
        """One row per model for the timing table."""
        out = []
        for model in self.models():
            train = self.stats(model, "train")
            infer = self.stats(model, "inference")
            with self._lock:
                errors = self._errors.get(model, 0)
            out.append(
                {
                    "model": model,
                    "train_mean_s": train["mean_s"],
                    "train_std_s": train["std_s"],
                    "train_total_s": train["total_s"],
                    "inference_mean_s": infer["mean_s"],
                    "inference_std_s": infer["std_s"],
                    "folds": train["count"],
                    "errors": errors,
                }
            )
        return out

    def reset(self) -> None:
        with self._lock:
            self._times.clear()
            self._errors.clear()


class Timer:
    """Context manager timing one phase of one model."""

    def __init__(self, recorder: TimingRecorder, model: str, phase: str):
        self.recorder = recorder
        self.model = model
        self.phase = phase
        self.start_time: Optional[float] = None
        self.seconds: Optional[float] = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start_time is not None:
            self.seconds = time.perf_counter() - self.start_time
            if exc_type is None:
                self.recorder.record(self.model, self.phase, self.seconds)
            else:
                self.recorder.record_error(self.model)
        # Don't suppress exceptions
        return False
