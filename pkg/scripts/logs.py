#!/usr/bin/env python3
"""Structured logging setup for agworkforce commands.

Log records are line-delimited JSON on stderr so they never mix with the
summary printed on stdout or with the result files.
"""

from __future__ import annotations

import logging
import os
import sys
from typing import Optional

import structlog

LOG_LEVEL_ENV = "AGWORK_LOG_LEVEL"
LOG_FORMAT_ENV = "AGWORK_LOG_FORMAT"


def configure_logging(level: Optional[str] = None, fmt: Optional[str] = None) -> None:
    """Configure structlog for this process (later calls replace the setup).

    Args:
        level: Log level name (defaults to AGWORK_LOG_LEVEL, then INFO)
        fmt: "json" (default) or "console"
    """
    level_name = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").strip().upper()
    numeric_level = logging.getLevelName(level_name)
    if not isinstance(numeric_level, int):
        numeric_level = logging.INFO

    fmt_name = (fmt or os.getenv(LOG_FORMAT_ENV) or "json").strip().lower()
    if fmt_name == "console":
        renderer: structlog.types.Processor = structlog.dev.ConsoleRenderer(colors=False)
    else:
        renderer = structlog.processors.JSONRenderer(sort_keys=True)

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso", utc=True),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )
