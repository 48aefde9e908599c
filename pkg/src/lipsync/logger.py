"""
Run logging for the lip-sync tools.

Console lines are short (`[LEVEL] message`); the per-workspace run log keeps
timestamps and logger names. Both handlers sit on the root logger, so module
loggers and library warnings end up in the same run log.
"""

from __future__ import annotations

import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

from src.lipsync import config

LOG_FILE_NAME = "lipsync.log"
_CONSOLE_FORMAT = "[%(levelname)s] %(message)s"
_RUN_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_RUN_LOG_BYTES = 512_000
_RUN_LOG_BACKUPS = 3
# chatty at INFO during imports and PNG decoding
_QUIET_LIBRARIES = ("numba", "PIL", "matplotlib")

_run_log: Optional[RotatingFileHandler] = None


def _open_run_log(log_dir: Path) -> RotatingFileHandler:
    log_dir.mkdir(parents=True, exist_ok=True)
    handler = RotatingFileHandler(
        filename=str(log_dir / LOG_FILE_NAME),
        maxBytes=_RUN_LOG_BYTES,
        backupCount=_RUN_LOG_BACKUPS,
        encoding="utf-8",
    )
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter(_RUN_LOG_FORMAT))
    return handler


def _install() -> None:
    global _run_log
    if _run_log is not None:
        return
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for name in _QUIET_LIBRARIES:
        logging.getLogger(name).setLevel(logging.WARNING)

    console = logging.StreamHandler()
    console.setLevel(logging.INFO)
    console.setFormatter(logging.Formatter(_CONSOLE_FORMAT))
    root.addHandler(console)

    _run_log = _open_run_log(config.LOGS_DIR)
    root.addHandler(_run_log)


def configure(log_dir: Path) -> Path:
    """Move the run log into `log_dir` and return the new log file path."""
    global _run_log
    _install()
    root = logging.getLogger()
    root.removeHandler(_run_log)
    _run_log.close()
    _run_log = _open_run_log(log_dir)
    root.addHandler(_run_log)
    return log_dir / LOG_FILE_NAME


def run_log_path() -> Path:
    _install()
    return Path(_run_log.baseFilename)


def get_logger(name: str) -> logging.Logger:
    _install()
    return logging.getLogger(name)
