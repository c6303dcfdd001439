import logging
import sys
from typing import Optional

_PACKAGE = 'binloc'


def setup_logger(name: Optional[str] = None, level: int = logging.INFO) -> logging.Logger:
    """
    Set up a logger with consistent formatting and handlers

    Args:
        name: Optional name for the logger. If None, uses the root logger
        level: Initial level for the logger and its console handler

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Only add handlers if they haven't been added yet
    if not logger.handlers:
        logger.setLevel(level)

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(logging.DEBUG)

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        # Prevent propagation to avoid duplicate logs
        logger.propagate = False

    return logger


def set_level(level: int) -> None:
    """Apply a level to every logger created for the package"""
    for name, logger in logging.Logger.manager.loggerDict.items():
        if name.startswith(_PACKAGE) and isinstance(logger, logging.Logger):
            logger.setLevel(level)


def log_progress(logger: logging.Logger, done: int, total: int, what: str) -> None:
    """Progress line every 10 items, or every tenth of the run for long runs"""
    step = max(10, total // 10)
    if done % step == 0 or done == total:
        logger.info(f"Progress: {done}/{total} {what}")
