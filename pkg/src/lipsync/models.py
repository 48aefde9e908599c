"""
models.py: data records passed between the pipeline stages.

Arrays on the data side are numpy float32; everything that flows through a
network is a torch tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from src.lipsync.exceptions import ContractError


# ---------- data ----------

@dataclass(slots=True)
class MelChunk:
    """
    A slice of log-mel spectrogram aligned to a video frame.

    Attributes:
        values: 1 × mel_bins × mel_steps_per_window log10 amplitudes.
        start_frame: video frame index the chunk starts at.
    """
    values: np.ndarray
    start_frame: int


@dataclass(slots=True)
class VideoClip:
    """
    One face-crop video with its audio.

    Attributes:
        video_id: folder name / opaque identifier.
        frames: N × 3 × H × W float32 in [0, 1].
        waveform: mono float32 PCM at the window sample rate.
        mel: mel_bins × n_steps log-mel spectrogram of `waveform`.
        frequencies: synthetic clips only, tone frequency per frame (Hz).
        mouth_heights: synthetic clips only, mouth height per frame (pixels).
    """
    video_id: str
    frames: np.ndarray
    waveform: np.ndarray
    mel: np.ndarray
    frequencies: Optional[np.ndarray] = None
    mouth_heights: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(slots=True)
class TrainingWindow:
    """
    T target frames, T reference frames from elsewhere in the same video,
    the window mel chunk (sync expert input) and one centred chunk per
    target frame (generator input). `target` and `reference` are read-only
    views into the clip's frame array.
    """
    video_id: str
    target: np.ndarray
    reference: np.ndarray
    mel: MelChunk
    target_start: int
    reference_start: int
    frame_mels: Optional[np.ndarray] = None


@dataclass(slots=True)
class SyncPair:
    """Lower-half face window (3T × 48 × 96), a mel chunk and a 0/1 sync label."""
    face_window: np.ndarray
    mel: np.ndarray
    label: int


# ---------- network-side records ----------

@dataclass(slots=True)
class ChannelStats:
    """Per-channel spatial mean and population std, shaped B × C × 1 × 1."""
    mean: torch.Tensor
    std: torch.Tensor


@dataclass(slots=True)
class AttentionMasks:
    """CBAM gates: channel B × C × 1 × 1 and spatial B × 1 × H × W, all in (0, 1)."""
    channel: torch.Tensor
    spatial: torch.Tensor


@dataclass(slots=True)
class EncoderOutput:
    """Face-encoder bottleneck plus skips ordered from high to low resolution (48², 24², 12²)."""
    bottleneck: torch.Tensor
    skips: list[torch.Tensor] = field(default_factory=list)


# ---------- losses ----------

@dataclass(slots=True)
class LossWeights:
    """Sync weight alpha and perceptual weight beta; recon gets 1 - alpha - beta."""
    alpha: float = 0.03
    beta: float = 0.07

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta >= 1:
            raise ContractError(
                f"loss weights need alpha, beta >= 0 and alpha + beta < 1, got {self.alpha}, {self.beta}"
            )

    @classmethod
    def from_config(cls, trainer_cfg) -> "LossWeights":
        """Weights from a TrainConfig; with LPIPS disabled beta is 0 and recon takes its share."""
        return cls(alpha=trainer_cfg.alpha, beta=trainer_cfg.beta if trainer_cfg.use_lpips else 0.0)

    @property
    def recon(self) -> float:
        return 1.0 - self.alpha - self.beta


@dataclass(slots=True)
class LossReport:
    recon: float
    sync: float
    lpips: float
    total: float
    weights: LossWeights

    def to_record(self, step: int) -> dict:
        return {
            "step": step,
            "recon": self.recon,
            "sync": self.sync,
            "lpips": self.lpips,
            "total": self.total,
        }


# ---------- metrics ----------

@dataclass(slots=True)
class SyncScores:
    """
    Expert distances per window and offset, with the derived LSE statistics.

    Attributes:
        offsets: the evaluated offsets, -max_offset..+max_offset.
        distances: n_windows × n_offsets, each 1 - cosine.
        lse_d: mean over windows of the minimum distance.
        lse_c: mean over windows of (median - minimum).
        best_offsets: argmin offset per window.
    """
    offsets: np.ndarray
    distances: np.ndarray
    lse_d: float
    lse_c: float
    best_offsets: np.ndarray

    @property
    def n_windows(self) -> int:
        return int(self.distances.shape[0])


@dataclass(slots=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
