"""
Structured logging configuration for PlaneBA using structlog.

Console output when debugging, JSON lines otherwise. Solver and pipeline
modules log snake_case events with keyword context, e.g.

    log = get_logger(__name__)
    log.info("lm_finished", iterations=10, final_cost=1.2e-3)
"""

import logging
import sys
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path

import numpy as np

try:
    import structlog
except ImportError:
    raise ImportError(
        "structlog is required for structured logging. "
        "Install it with: pip install structlog"
    )

LOG_FILE = 'planeba.log'


def numpy_to_builtin(logger, method_name, event_dict):
    """Replace numpy scalars and arrays in the event with plain Python values."""
    for key, value in event_dict.items():
        if isinstance(value, np.generic):
            event_dict[key] = value.item()
        elif isinstance(value, np.ndarray):
            event_dict[key] = value.tolist()
    return event_dict


def _level_number(log_level):
    if isinstance(log_level, int):
        return log_level
    level = logging.getLevelName(str(log_level).upper())
    return level if isinstance(level, int) else logging.INFO


def _rotating_file_handler(log_dir, level):
    path = Path(log_dir)
    path.mkdir(parents=True, exist_ok=True)
    handler = TimedRotatingFileHandler(path / LOG_FILE, when='midnight', backupCount=30, encoding='utf-8')
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter('%(message)s'))
    return handler


def configure_logging(debug=False, log_level=logging.INFO, log_dir=None):
    """
    Configure structlog and the stdlib root logger.

    Args:
        debug: Pretty console output instead of JSON
        log_level: Level name or number; unknown names mean INFO
        log_dir: Optional directory for a daily-rotated ``planeba.log``

    Returns:
        structlog logger instance
    """
    level = _level_number(log_level)

    processors = [
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.processors.TimeStamper(fmt="iso", utc=True),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        numpy_to_builtin,
        structlog.dev.ConsoleRenderer() if debug else structlog.processors.JSONRenderer(),
    ]

    structlog.configure(
        processors=processors,
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    # structlog renders; stdlib only routes
    logging.basicConfig(format="%(message)s", stream=sys.stdout, level=level)
    root = logging.getLogger()
    root.setLevel(level)
    if log_dir:
        root.addHandler(_rotating_file_handler(log_dir, level))

    return structlog.get_logger("planeba")


def configure_from_settings(settings):
    """Configure logging from a ``load_settings`` dict."""
    return configure_logging(
        debug=settings.get('DEBUG', False),
        log_level=settings.get('LOG_LEVEL', 'INFO'),
        log_dir=settings.get('LOG_DIR'),
    )


def get_logger(name):
    """Return a structlog logger bound to ``name``."""
    return structlog.get_logger(name)
