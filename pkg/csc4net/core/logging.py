"""
structlog setup for library and CLI output.
"""

import logging
import sys
from typing import Optional

import structlog

from .config import settings


def _stderr_logger(*args) -> structlog.PrintLogger:
    # resolved per logger so a swapped sys.stderr is honored
    return structlog.PrintLogger(file=sys.stderr)


def resolve_level(level: Optional[str] = None) -> str:
    """Explicit level, else DEBUG when ``settings.DEBUG`` is on, else ``settings.LOG_LEVEL``."""
    if level:
        return level.upper()
    return "DEBUG" if settings.DEBUG else settings.LOG_LEVEL


def configure_logging(level: Optional[str] = None, json: Optional[bool] = None) -> None:
    """Configure structlog to render key-value (or JSON) events on stderr.

    Args:
        level: Minimum level name; defaults to ``resolve_level``.
        json: Render JSON lines instead of the console format; defaults to
            ``settings.LOG_JSON``.
    """
    level_name = resolve_level(level)
    use_json = settings.LOG_JSON if json is None else json

    renderer = (
        structlog.processors.JSONRenderer()
        if use_json
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            getattr(logging, level_name, logging.INFO)
        ),
        logger_factory=_stderr_logger,
        cache_logger_on_first_use=False,
    )
