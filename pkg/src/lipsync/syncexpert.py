"""
A pretrained audio-visual sync discriminator, frozen while the generator trains.

Two conv encoders map a stack of T lower-half frames and the matching mel
chunk into a shared D-dimensional unit-norm space; the sync probability is
the cosine similarity of the two embeddings, clamped into (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset, Subset

from src.lipsync import storage
from src.lipsync.blocks import ConvBlock
from src.lipsync.config import ExpertConfig, WindowConfig, seed_everything
from src.lipsync.datapipe import crop_mel
from src.lipsync.exceptions import ContractError, DatasetError, TrainingError
from src.lipsync.logger import get_logger
from src.lipsync.models import SyncPair, VideoClip

log = get_logger(__name__)

CHECKPOINT_KIND = "expert"
SCORE_EPS = 1e-7
_ARCH_KEYS = ("embed_dim", "width", "T")


# ---------- window shaping ----------

def crop_lower_half(frames: torch.Tensor) -> torch.Tensor:
    """(..., 3, H, W) → (..., 3, H/2, W): keep rows H/2 and below."""
    return frames[..., frames.shape[-2] // 2:, :]


def stack_window(frames: torch.Tensor) -> torch.Tensor:
    """B × T × 3 × h × w → B × 3T × h × w, frame-major channel order."""
    if frames.dim() != 5:
        raise ContractError(f"expected B×T×3×h×w, got {tuple(frames.shape)}")
    b, t, c, h, w = frames.shape
    return frames.reshape(b, t * c, h, w)


# ---------- model ----------

class SyncExpert(nn.Module):
    def __init__(self, cfg: ExpertConfig, image_size: int = 96, mel_bins: int = 80, mel_steps: int = 16) -> None:
        super().__init__()
        self.cfg = cfg
        self.face_shape = (3 * cfg.T, image_size // 2, image_size)
        self.mel_shape = (1, mel_bins, mel_steps)
        w, d = cfg.width, cfg.embed_dim
        # 3T×48×96 → 48×48 → 24 → 12 → 6 → 3
        self.face_encoder = nn.Sequential(
            ConvBlock(3 * cfg.T, w, 5, (1, 2), 2),
            ConvBlock(w, 2 * w, 3, 2, 1),
            ConvBlock(2 * w, 4 * w, 3, 2, 1),
            ConvBlock(4 * w, 8 * w, 3, 2, 1),
            ConvBlock(8 * w, 16 * w, 3, 2, 1),
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(16 * w, d, 1),
            nn.ReLU(),
        )
        # 1×80×16 → 80×16 → 27×16 → 9×6 → 3×3
        self.audio_encoder = nn.Sequential(
            ConvBlock(1, w, 3, 1, 1),
            ConvBlock(w, 2 * w, 3, (3, 1), 1),
            ConvBlock(2 * w, 4 * w, 3, 3, 1),
            ConvBlock(4 * w, 8 * w, 3, (3, 2), 1),
            ConvBlock(8 * w, 16 * w, 3, 1, 1),
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(16 * w, d, 1),
            nn.ReLU(),
        )
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def mark_trained(self) -> "SyncExpert":
        self.trained.fill_(True)
        return self

    def embed_video(self, face_window: torch.Tensor) -> torch.Tensor:
        if tuple(face_window.shape[1:]) != self.face_shape:
            raise ContractError(f"face window must be B×{self.face_shape}, got {tuple(face_window.shape)}")
        return F.normalize(self.face_encoder(face_window).flatten(1), dim=1)

    def embed_audio(self, mel: torch.Tensor) -> torch.Tensor:
        if tuple(mel.shape[1:]) != self.mel_shape:
            raise ContractError(f"mel chunk must be B×{self.mel_shape}, got {tuple(mel.shape)}")
        return F.normalize(self.audio_encoder(mel).flatten(1), dim=1)

    def forward(self, face_window: torch.Tensor, mel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.embed_video(face_window), self.embed_audio(mel)


def sync_score(v: torch.Tensor, a: torch.Tensor, eps: float = SCORE_EPS) -> torch.Tensor:
    """Cosine similarity of paired embeddings, clamped into [eps, 1]; symmetric in v and a."""
    if v.shape != a.shape:
        raise ContractError(f"embedding shapes differ: {tuple(v.shape)} vs {tuple(a.shape)}")
    return F.cosine_similarity(v, a, dim=-1).clamp(eps, 1.0)


def freeze(module: nn.Module) -> nn.Module:
    """Eval mode and no gradients; the module stays frozen for the rest of the run."""
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------- pairs ----------

class SyncPairDataset(Dataset):
    """
    Balanced in-sync / off-sync pairs drawn from clips. Positives pair a
    window with its own mel chunk; negatives with a chunk at least
    `min_offset` frames away in the same video. Pairs are materialised on
    access; only indices are held.
    """

    def __init__(self, clips: Sequence[VideoClip], cfg: WindowConfig, n_pairs: int,
                 seed: int = 0, min_offset: int = 3) -> None:
        self.clips = list(clips)
        self.cfg = cfg
        self.index: list[tuple[int, int, int, int]] = []

        valid = []
        for ci, clip in enumerate(self.clips):
            starts = [t for t in range(clip.n_frames - cfg.T + 1) if crop_mel(clip.mel, t, cfg) is not None]
            if len(starts) >= 2 and max(starts) - min(starts) >= min_offset:
                valid.append((ci, starts))
        if not valid:
            raise DatasetError("no clip is long enough to draw sync pairs from")

        rng = np.random.default_rng(seed)
        for k in range(n_pairs):
            ci, starts = valid[int(rng.integers(len(valid)))]
            t = starts[int(rng.integers(len(starts)))]
            label = 1 if k % 2 == 0 else 0
            if label:
                m = t
            else:
                far = [s for s in starts if abs(s - t) >= min_offset]
                if not far:
                    continue
                m = far[int(rng.integers(len(far)))]
            self.index.append((ci, t, m, label))

    @property
    def labels(self) -> np.ndarray:
        return np.array([i[3] for i in self.index], dtype=np.int64)

    def pair(self, i: int) -> SyncPair:
        ci, t, m, label = self.index[i]
        clip = self.clips[ci]
        window = clip.frames[t:t + self.cfg.T, :, self.cfg.image_size // 2:, :]
        return SyncPair(
            face_window=window.reshape(-1, *window.shape[-2:]).astype(np.float32),
            mel=crop_mel(clip.mel, m, self.cfg).values,
            label=label,
        )

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        p = self.pair(i)
        return torch.from_numpy(p.face_window), torch.from_numpy(p.mel), torch.tensor(float(p.label))


def build_sync_pairs(clips: Sequence[VideoClip], cfg: WindowConfig, n_pairs: int,
                     seed: int = 0, min_offset: int = 3) -> list[SyncPair]:
    ds = SyncPairDataset(clips, cfg, n_pairs, seed, min_offset)
    return [ds.pair(i) for i in range(len(ds))]


# ---------- training ----------

@dataclass(slots=True)
class ExpertResult:
    expert: SyncExpert
    curve: list[dict] = field(default_factory=list)
    accuracy: float = 0.0
    # mean synced score minus mean shifted score on the holdout pairs
    score_gap: float = 0.0


def holdout_scores(expert: SyncExpert, loader: DataLoader) -> tuple[float, float]:
    """Accuracy at the 0.5 threshold and the synced-minus-shifted mean score gap."""
    expert.eval()
    scores, labels = [], []
    with torch.no_grad():
        for face, mel, label in loader:
            scores.append(sync_score(*expert(face, mel)))
            labels.append(label)
    if not scores:
        return 0.0, 0.0
    s, y = torch.cat(scores), torch.cat(labels)
    accuracy = float(((s > 0.5).float() == y).float().mean())
    pos, neg = s[y == 1], s[y == 0]
    gap = float(pos.mean() - neg.mean()) if len(pos) and len(neg) else 0.0
    return accuracy, gap


def train_expert(pairs: SyncPairDataset, cfg: ExpertConfig, window: Optional[WindowConfig] = None) -> ExpertResult:
    """
    Binary cross-entropy on sync scores with Adam. A holdout split (fixed by
    the seed) measures accuracy after every epoch; the returned expert is
    marked trained and frozen.

    Raises:
        DatasetError if there are no pairs or too few to fill one batch.
    """
    window = window or WindowConfig(T=cfg.T)
    n = len(pairs)
    if n == 0:
        raise DatasetError("sync pair set is empty")
    labels = pairs.labels
    share = float(labels.mean())
    if not 0.4 <= share <= 0.6:
        log.warning("unbalanced sync pairs: %.0f%% positive", 100 * share)

    seed_everything(cfg.seed)
    perm = np.random.default_rng(cfg.seed).permutation(n)
    n_hold = max(1, int(round(cfg.holdout * n)))
    train_idx, hold_idx = perm[n_hold:].tolist(), perm[:n_hold].tolist()
    if len(train_idx) < cfg.batch_size:
        raise DatasetError(f"{len(train_idx)} training pairs cannot fill a batch of {cfg.batch_size}")

    g = torch.Generator().manual_seed(cfg.seed)
    # drop_last: batch norm needs >= 2 samples in train mode
    train_loader = DataLoader(Subset(pairs, train_idx), batch_size=cfg.batch_size, shuffle=True,
                              generator=g, drop_last=True)
    hold_loader = DataLoader(Subset(pairs, hold_idx), batch_size=cfg.batch_size)

    expert = SyncExpert(cfg, window.image_size, window.mel_bins, window.mel_steps_per_window)
    optimizer = torch.optim.Adam(expert.parameters(), lr=cfg.learning_rate)
    result = ExpertResult(expert=expert)

    for epoch in range(cfg.epochs):
        expert.train()
        losses = []
        for face, mel, label in train_loader:
            loss = F.binary_cross_entropy(sync_score(*expert(face, mel)), label)
            if not torch.isfinite(loss):
                raise TrainingError(f"expert loss became non-finite at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        acc, gap = holdout_scores(expert, hold_loader)
        result.curve.append({"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": acc, "score_gap": gap})
        log.info("expert epoch %d: loss=%.4f holdout_acc=%.3f score_gap=%.3f", epoch, result.curve[-1]["loss"], acc, gap)

    result.accuracy, result.score_gap = holdout_scores(expert, hold_loader)
    freeze(expert.mark_trained())
    return result


# ---------- checkpoints ----------

def save_expert(path: Path, expert: SyncExpert, data_config_hash: str, accuracy: float = 0.0) -> Path:
    arch = {k: getattr(expert.cfg, k) for k in _ARCH_KEYS}
    arch.update(image_size=expert.face_shape[2], mel_bins=expert.mel_shape[1], mel_steps=expert.mel_shape[2])
    return storage.save_checkpoint(path, CHECKPOINT_KIND, arch, expert.state_dict(), data_config_hash,
                                   extra={"accuracy": accuracy})


def load_expert(path: Path, data_config_hash: Optional[str] = None) -> SyncExpert:
    """Load a frozen expert (eval mode, no gradients)."""
    payload = storage.load_checkpoint(path, CHECKPOINT_KIND, data_config_hash=data_config_hash)
    arch = dict(payload["config"])
    geometry = {k: arch.pop(k) for k in ("image_size", "mel_bins", "mel_steps")}
    expert = SyncExpert(ExpertConfig(**arch), **geometry)
    expert.load_state_dict(payload["state_dict"])
    log.info("loaded sync expert '%s' (holdout accuracy %.3f)", path.name, payload["extra"].get("accuracy", 0.0))
    return freeze(expert)
