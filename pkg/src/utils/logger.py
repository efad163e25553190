"""Logging configuration for ElastoInverse"""

import logging
import logging.handlers
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def _formatter() -> logging.Formatter:
    return logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)


def setup_logging(log_level: str = "INFO", log_file: str = "elastoinverse.log", log_dir: str = "logs"):
    """Console logging on stdout plus a rotating file under ``log_dir``"""
    level = getattr(logging, log_level.upper(), logging.INFO)
    root = logging.getLogger()
    root.setLevel(level)
    for handler in root.handlers[:]:
        root.removeHandler(handler)

    console = logging.StreamHandler(sys.stdout)
    console.setLevel(level)
    console.setFormatter(_formatter())
    root.addHandler(console)

    path = Path(log_dir) / log_file
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        rotating = logging.handlers.RotatingFileHandler(
            path,
            maxBytes=10 * 1024 * 1024,
            backupCount=5,
            encoding='utf-8',
        )
    except OSError as e:
        logging.getLogger(__name__).warning(f"File logging disabled ({path}): {e}")
    else:
        rotating.setLevel(level)
        rotating.setFormatter(_formatter())
        root.addHandler(rotating)

    logger = logging.getLogger(__name__)
    logger.info(f"ElastoInverse logging initialized (level {log_level.upper()}, file {path})")
    return logger


@contextmanager
def run_log(directory: Path, name: str = "run.log") -> Iterator[Path]:
    """Copy every record emitted inside the block to ``directory/name``

    The file is truncated on entry so each experiment directory holds the log
    of its latest run only.
    """
    path = Path(directory) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode='w', encoding='utf-8')
    handler.setFormatter(_formatter())
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield path
    finally:
        root.removeHandler(handler)
        handler.close()
