"""
user-safe exceptions
for data, model contracts, configuration, checkpoints, training and metrics.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional


class LipsyncError(Exception):
    """Root of every error raised on purpose by this package."""


# ---- Input errors ----
class InputError(LipsyncError):
    """Raised when user-provided audio/video data is unusable."""

class DatasetError(InputError):
    """Raised when a dataset directory does not follow the expected layout."""

class VideoTooShortError(InputError):
    """Raised when a video has fewer frames than an operation needs."""

    def __init__(self, message: str, minimum_frames: int) -> None:
        super().__init__(message)
        self.minimum_frames = minimum_frames


# ---- Model contracts ----
class ContractError(LipsyncError, ValueError):
    """Raised when a tensor violates a shape or channel contract."""


# ---- Configuration ----
class ConfigError(LipsyncError):
    """Raised for invalid, inconsistent or missing configuration."""


# ---- Checkpoints ----
class CheckpointError(LipsyncError):
    """Raised when a checkpoint cannot be read or written."""

class CheckpointMismatchError(CheckpointError):
    """Raised when a checkpoint was produced under a different config or format."""


# ---- Training ----
class TrainingError(LipsyncError):
    """Top-level training failure (user-safe)."""

class NonFiniteLossError(TrainingError):
    """Raised when a loss becomes NaN/inf; the offending batch is dumped first."""

    def __init__(self, message: str, dump_path: Optional[Path] = None) -> None:
        super().__init__(message)
        self.dump_path = dump_path


# ---- Metrics ----
class MetricError(LipsyncError):
    """Raised when metric preconditions are not met."""
