"""
Shared logging utilities for the SLAM engine.
Consolidates the logging helpers used by tracking, mapping, evaluation and the CLI.
"""

import logging
import os
import sys

LOG_FORMAT = '%(asctime)s-%(levelname)s-%(filename)s:%(lineno)d-%(message)s'


def configure_logger_with_line_numbers(logger_name: str, level: int = logging.INFO) -> logging.Logger:
    """Configure a specific logger to include line numbers"""
    logger = logging.getLogger(logger_name)
    logger.setLevel(level)

    # Remove existing handlers
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)

    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)

    # Prevent propagation to root logger to avoid duplicate messages
    logger.propagate = False
    return logger


def _resolve_logger(context):
    if context is not None and hasattr(context, 'log'):
        return context.log
    return logging.getLogger(__name__)


def log_with_emoji(emoji: str, message: str, details: str = "", context=None):
    """
    Unified logging helper with emoji prefix.

    Args:
        emoji: Emoji to prefix the message
        message: Main log message
        details: Additional details to append
        context: Optional context object with log attribute
    """
    full_message = f"{emoji} {message}"
    if details:
        full_message += f" - {details}"
    _resolve_logger(context).info(full_message)


def log_debug(context, message):
    """Debug logging helper"""
    _resolve_logger(context).debug(f"🔍 {message}")


def log_warning(context, message):
    """Warning logging helper"""
    _resolve_logger(context).warning(f"⚠️ {message}")


def _format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def log_kv(logger: logging.Logger, event: str, level: int = logging.DEBUG, **fields):
    """
    Emit one structured record: ``event key=value key=value``.

    Args:
        logger: Destination logger
        event: Record name, e.g. ``gicp.iter``
        level: Logging level of the record
        **fields: Values to attach; floats are printed with 6 significant digits
    """
    if not logger.isEnabledFor(level):
        return
    body = " ".join(f"{key}={_format_value(value)}" for key, value in fields.items())
    logger.log(level, f"{event} {body}".rstrip())


def progress_enabled() -> bool:
    """Progress bars only on interactive, non-deterministic runs."""
    if os.getenv('G2S_DETERMINISTIC', '0') == '1':
        return False
    return sys.stdout.isatty()
