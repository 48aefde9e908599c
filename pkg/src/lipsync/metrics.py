"""
Evaluation metrics.

- lse: slide the mel by -max_offset..+max_offset frames against every face
  window and read expert distances (1 - cosine). LSE-D is the mean best
  distance, LSE-C the mean gap between the median and the best distance.
- fid: Frechet distance between Gaussian fits of frame features.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.lipsync.blocks import seeded_init_
from src.lipsync.config import WindowConfig
from src.lipsync.datapipe import crop_mel
from src.lipsync.exceptions import ContractError, MetricError, VideoTooShortError
from src.lipsync.logger import get_logger
from src.lipsync.models import GaussianStats, SyncScores
from src.lipsync.syncexpert import SyncExpert, crop_lower_half, stack_window

log = get_logger(__name__)

EIG_TOLERANCE = 1e-8
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


# ---------- lip-sync error ----------

def lse_from_distances(distances: np.ndarray, offsets: np.ndarray) -> SyncScores:
    """Aggregate an n_windows × n_offsets distance table."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.ndim != 2 or distances.shape[0] == 0 or distances.shape[1] != len(offsets):
        raise MetricError(f"distance table {distances.shape} does not match {len(offsets)} offsets")
    best = distances.min(axis=1)
    return SyncScores(
        offsets=np.asarray(offsets),
        distances=distances,
        lse_d=float(best.mean()),
        lse_c=float((np.median(distances, axis=1) - best).mean()),
        best_offsets=np.asarray(offsets)[distances.argmin(axis=1)],
    )


def _as_tensor(x) -> torch.Tensor:
    return x.float() if isinstance(x, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


@torch.no_grad()
def lse_distances(frames, mel_full: np.ndarray, expert: SyncExpert, cfg: WindowConfig,
                  max_offset: int = 15, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """
    Distance table for every window position whose mel chunks exist at all
    offsets.

    Raises:
        VideoTooShortError if the video has fewer than T + 2·max_offset frames
        (or no window position survives the audio length).
    """
    T = cfg.T
    n = int(frames.shape[0])
    minimum = T + 2 * max_offset
    if n < minimum:
        raise VideoTooShortError(f"lse needs at least {minimum} frames, video has {n}", minimum_frames=minimum)

    offsets = np.arange(-max_offset, max_offset + 1)
    chunks = {t: crop_mel(mel_full, t, cfg) for t in range(n - T + 1)}
    positions = [
        t for t in range(max_offset, n - T - max_offset + 1)
        if all(chunks.get(t + o) is not None for o in offsets)
    ]
    if not positions:
        raise VideoTooShortError(f"audio too short for lse over ±{max_offset} frames", minimum_frames=minimum)

    expert.eval()
    frames_t = _as_tensor(frames)
    windows = torch.stack([frames_t[t:t + T] for t in positions])
    face = stack_window(crop_lower_half(windows))
    v = torch.cat([expert.embed_video(face[i:i + batch_size]) for i in range(0, len(face), batch_size)])

    starts = sorted({t + o for t in positions for o in offsets})
    mels = torch.stack([torch.from_numpy(chunks[s].values) for s in starts])
    a_all = torch.cat([expert.embed_audio(mels[i:i + batch_size]) for i in range(0, len(mels), batch_size)])
    row = {s: i for i, s in enumerate(starts)}

    idx = torch.tensor([[row[t + o] for o in offsets] for t in positions])
    cos = (v[:, None, :] * a_all[idx]).sum(dim=-1)
    return (1.0 - cos).double().numpy(), offsets


def lse(frames, mel_full: np.ndarray, expert: SyncExpert, cfg: WindowConfig,
        max_offset: int = 15, batch_size: int = 64) -> SyncScores:
    distances, offsets = lse_distances(frames, mel_full, expert, cfg, max_offset, batch_size)
    return lse_from_distances(distances, offsets)


# ---------- Frechet distance ----------

def gaussian_fit(features) -> GaussianStats:
    """Sample mean and unbiased covariance of an N × D feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError(f"gaussian fit needs at least 2 feature rows, got shape {x.shape}")
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return GaussianStats(mean=x.mean(axis=0), cov=cov)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    sym = 0.5 * (m + m.T)
    w, v = scipy.linalg.eigh(sym)
    if w.min(initial=0.0) < -EIG_TOLERANCE * max(1.0, abs(w).max(initial=0.0)):
        log.warning("covariance has a negative eigenvalue %.3e; clipping to 0", w.min())
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt(m: np.ndarray) -> float:
    w = scipy.linalg.eigvalsh(0.5 * (m + m.T))
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(g1: GaussianStats, g2: GaussianStats) -> float:
    """
    ‖μ1 − μ2‖² + tr(Σ1) + tr(Σ2) − 2·tr((Σ1^½ Σ2 Σ1^½)^½).

    The symmetric product keeps every square root an eigendecomposition of a
    PSD matrix.
    """
    if g1.mean.shape != g2.mean.shape or g1.cov.shape != g2.cov.shape:
        raise ContractError(f"feature dimensions differ: {g1.mean.shape} vs {g2.mean.shape}")
    diff = g1.mean - g2.mean
    s1 = _psd_sqrt(g1.cov)
    covmean_trace = _trace_sqrt(s1 @ g2.cov @ s1)
    d = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * covmean_trace)
    return max(d, 0.0)


# ---------- feature extractors ----------

class TinyExtractor(nn.Module):
    """Seeded conv stack + global average pooling; deterministic and offline."""

    def __init__(self, seed: int = 0, dim: int = 64) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, dim, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
        )
        seeded_init_(self, seed)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(2.0 * x - 1.0).flatten(1)


class InceptionExtractor(nn.Module):
    """2048-D pool features of the torchvision ImageNet Inception-v3."""

    def __init__(self) -> None:
        super().__init__()
        from torchvision.models import Inception_V3_Weights, inception_v3

        model = inception_v3(weights=Inception_V3_Weights.DEFAULT, aux_logits=True)
        model.fc = nn.Identity()
        self.model = model.eval()
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.model((x - self.mean) / self.std)


def build_extractor(name: str, seed: int = 0) -> nn.Module:
    if name == "tiny":
        return TinyExtractor(seed)
    if name == "inception":
        return InceptionExtractor()
    raise MetricError(f"unknown feature extractor {name!r}")


@torch.no_grad()
def extract_features(frames, extractor: nn.Module, batch_size: int = 64) -> np.ndarray:
    extractor.eval()
    x = _as_tensor(frames)
    out = [extractor(x[i:i + batch_size]).double() for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


def fid(real_frames, gen_frames, extractor: nn.Module, batch_size: int = 64) -> float:
    """
    Raises:
        MetricError if either set has fewer than 2 frames.
    """
    for name, frames in (("real", real_frames), ("generated", gen_frames)):
        if len(frames) < 2:
            raise MetricError(f"fid needs at least 2 {name} frames, got {len(frames)}")
    g_real = gaussian_fit(extract_features(real_frames, extractor, batch_size))
    g_gen = gaussian_fit(extract_features(gen_frames, extractor, batch_size))
    return frechet_distance(g_real, g_gen)


def pooled_lse(tables: Sequence[np.ndarray], offsets: np.ndarray) -> SyncScores:
    """LSE over the windows of several videos (mean over all windows)."""
    if not tables:
        raise MetricError("no video produced lse windows")
    return lse_from_distances(np.concatenate(tables, axis=0), offsets)
