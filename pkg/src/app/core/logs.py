"""Logging setup for command-line runs."""

import logging

from app.core.config import settings

_configured = False


def configure_logging(level: str | None = None) -> None:
    """Configure root logging once from LOG_LEVEL / LOG_FORMAT."""
    global _configured
    if _configured:
        return
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format=settings.LOG_FORMAT,
    )
    _configured = True
