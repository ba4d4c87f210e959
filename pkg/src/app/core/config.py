"""
Application configuration management.
Loads process-level defaults from environment variables (via .env if present).

Experiment-specific settings live in the pydantic models of
``app.core.experiment``; this module only carries the defaults those models
fall back to and the knobs that are not part of an experiment (logging,
metrics, worker count).
"""

import os

from dotenv import load_dotenv

# Load .env once at import time (real OS env still wins if set)
load_dotenv(override=False)


class Settings:
    # Application environment
    APP_ENV: str = os.getenv("APP_ENV", "development")

    # Posterior sampling / cross-validation defaults
    DEFAULT_DRAWS: int = int(os.getenv("MEDLUQ_DRAWS", "30"))
    DEFAULT_FOLDS: int = int(os.getenv("MEDLUQ_FOLDS", "10"))

    # Training defaults (shared by every backend)
    DEFAULT_EPOCHS: int = int(os.getenv("MEDLUQ_EPOCHS", "60"))
    DEFAULT_LR: float = float(os.getenv("MEDLUQ_LR", "0.01"))
    DEFAULT_BATCH_SIZE: int = int(os.getenv("MEDLUQ_BATCH_SIZE", "32"))
    SWAG_COLLECTION_EPOCHS: int = int(os.getenv("MEDLUQ_SWAG_EPOCHS", "30"))

    # Numerical guards
    LOGIT_EPS: float = float(os.getenv("MEDLUQ_LOGIT_EPS", "1e-6"))
    SIGMA_FLOOR: float = float(os.getenv("MEDLUQ_SIGMA_FLOOR", "1e-6"))

    # Parallel execution (only used with --parallel)
    WORKERS: int = int(os.getenv("MEDLUQ_WORKERS", str(os.cpu_count() or 2)))

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT: str = os.getenv(
        "LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    # Metrics configuration
    METRICS_ENABLED: bool = os.getenv("METRICS_ENABLED", "false").lower() == "true"
    METRICS_NAMESPACE: str = os.getenv("METRICS_NAMESPACE", "medluq")
    METRICS_BUCKETS: str = os.getenv(
        "METRICS_BUCKETS", "0.01,0.05,0.1,0.5,1,2,5,10,30,60,120,300"
    )

    # ---- Convenience helpers ----
    # Read dynamically so slow tests can be toggled per run / in CI.
    @property
    def RUN_SLOW_TESTS(self) -> bool:
        return os.getenv("RUN_SLOW_TESTS", "0").lower() in ("1", "true")


settings = Settings()
