"""
Logging configuration for mlx_handnerf.
"""
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - "
    "<level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"


def _not_metrics(record) -> bool:
    return not record["extra"].get("metrics", False)


def setup_logging(log_file: Optional[Path] = None, level: str = "INFO"):
    """Configure loguru logger with console and optional file outputs."""
    logger.remove()

    logger.add(
        sys.stdout,
        colorize=True,
        format=CONSOLE_FORMAT,
        level=level,
        filter=_not_metrics,
    )

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(exist_ok=True, parents=True)
        logger.add(
            log_file,
            rotation="10 MB",
            compression="zip",
            retention="1 week",
            format=FILE_FORMAT,
            level="DEBUG",
        )

    return logger


def add_metrics_sink(path: Path) -> int:
    """Route ``logger.bind(metrics=True)`` records to a line-delimited JSON file."""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    return logger.add(
        path,
        serialize=True,
        level="DEBUG",
        filter=lambda record: record["extra"].get("metrics", False),
    )


metrics_logger = logger.bind(metrics=True)
