"""
Training objective: L1 reconstruction, a learned perceptual distance, the
expert sync loss, and their weighted combination

    total = (1 - alpha - beta) * recon + alpha * sync + beta * lpips

Perceptual backbones are pluggable. Every backbone returns a list of feature
maps ("taps") and one non-negative weight vector per tap.
"""

from __future__ import annotations

from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.lipsync.blocks import seeded_init_
from src.lipsync.config import LpipsConfig
from src.lipsync.exceptions import ConfigError, ContractError
from src.lipsync.logger import get_logger
from src.lipsync.models import LossReport, LossWeights
from src.lipsync.syncexpert import SyncExpert, crop_lower_half, freeze, stack_window, sync_score

log = get_logger(__name__)

# channel normalisation floor inside the perceptual distance
NORM_EPS = 1e-10
Number = Union[float, torch.Tensor]


def _rescale(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] pixels → [-1, 1], the range every backbone expects."""
    return 2.0 * x - 1.0


# ---------- reconstruction ----------

def recon_loss(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if generated.shape != target.shape:
        raise ContractError(f"recon_loss shapes differ: {tuple(generated.shape)} vs {tuple(target.shape)}")
    return (generated - target).abs().mean()


# ---------- perceptual backbones ----------

class IdentityBackbone(nn.Module):
    """A single tap: the (rescaled) pixels themselves, unit weights."""

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]

    def channel_weights(self) -> list[torch.Tensor]:
        return [torch.ones(3)]


class TinyBackbone(nn.Module):
    """Three seeded conv/LeakyReLU stages, one tap after each; unit weights. No downloads."""

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (16, 32, 32)) -> None:
        super().__init__()
        stages, prev = [], 3
        for i, w in enumerate(widths):
            stages.append(nn.Sequential(nn.Conv2d(prev, w, 3, 1 if i == 0 else 2, 1), nn.LeakyReLU(0.2)))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.widths = widths
        seeded_init_(self, seed)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps

    def channel_weights(self) -> list[torch.Tensor]:
        return [torch.ones(w) for w in self.widths]


class PretrainedBackbone(nn.Module):
    """
    AlexNet features and linear calibration weights from the `lpips` package.
    The published weights multiply squared differences, so their square roots
    are used as the channel weights here.
    """

    def __init__(self) -> None:
        super().__init__()
        try:
            import lpips as lpips_pkg
        except ImportError as exc:
            raise ConfigError("the 'alexnet' perceptual backbone needs the lpips package") from exc
        model = lpips_pkg.LPIPS(net="alex", verbose=False)
        self.scaling = model.scaling_layer
        self.net = model.net
        self._weights = [lin.model[-1].weight.detach().flatten().clamp_min(0).sqrt() for lin in model.lins]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return list(self.net(self.scaling(x)))

    def channel_weights(self) -> list[torch.Tensor]:
        return self._weights


def build_backbone(cfg: LpipsConfig) -> nn.Module:
    if cfg.backbone == "identity":
        backbone = IdentityBackbone()
    elif cfg.backbone == "tiny":
        backbone = TinyBackbone(cfg.seed)
    else:
        backbone = PretrainedBackbone()
    log.info("perceptual backbone: %s", cfg.backbone)
    return freeze(backbone)


# ---------- perceptual distance ----------

def lpips(generated: torch.Tensor, target: torch.Tensor, backbone: nn.Module,
          reduction: str = "mean") -> torch.Tensor:
    """
    Sum over taps of the spatially averaged squared difference between
    channel-normalised, channel-weighted feature maps.

    Accepts 3 × H × W or B × 3 × H × W frames in [0, 1]. With reduction="none"
    returns one distance per frame.

    Raises:
        ContractError on shape mismatch.
        ConfigError if the backbone yields no taps or a weight per tap is missing.
    """
    if generated.shape != target.shape:
        raise ContractError(f"lpips shapes differ: {tuple(generated.shape)} vs {tuple(target.shape)}")
    if generated.dim() == 3:
        generated, target = generated.unsqueeze(0), target.unsqueeze(0)
    if generated.dim() != 4 or generated.shape[1] != 3:
        raise ContractError(f"lpips expects RGB frames, got {tuple(generated.shape)}")

    feats_g = backbone(_rescale(generated))
    feats_t = backbone(_rescale(target))
    weights = backbone.channel_weights()
    if not feats_g or len(weights) != len(feats_g):
        raise ConfigError(f"perceptual backbone gave {len(feats_g)} taps and {len(weights)} weight vectors")

    dist = generated.new_zeros(generated.shape[0])
    for fg, ft, w in zip(feats_g, feats_t, weights):
        if w.numel() != fg.shape[1]:
            raise ConfigError(f"tap with {fg.shape[1]} channels has {w.numel()} weights")
        w = w.to(fg).view(1, -1, 1, 1)
        ng = F.normalize(fg, dim=1, eps=NORM_EPS)
        nt = F.normalize(ft, dim=1, eps=NORM_EPS)
        dist = dist + (w * (nt - ng)).pow(2).sum(dim=1).mean(dim=(-2, -1))

    if reduction == "none":
        return dist
    return dist.mean()


class PerceptualLoss(nn.Module):
    """lpips over windows: frames are scored one by one and averaged."""

    def __init__(self, backbone: nn.Module) -> None:
        super().__init__()
        self.backbone = freeze(backbone)

    def forward(self, generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        flat = lambda x: x.reshape(-1, *x.shape[-3:])  # noqa: E731
        return lpips(flat(generated), flat(target), self.backbone)


# ---------- sync ----------

def sync_loss(generated_window: torch.Tensor, mel: torch.Tensor, expert: Optional[SyncExpert]) -> torch.Tensor:
    """
    -log(sync score) of the generated lower halves against the window mel,
    averaged over the batch.

    Args:
        generated_window: B × T × 3 × H × W (or T × 3 × H × W).
        mel: B × 1 × bins × steps (or 1 × bins × steps).

    Raises:
        ConfigError if the expert is missing or was never trained.
    """
    if expert is None:
        raise ConfigError("sync loss needs a sync expert checkpoint")
    if not bool(expert.trained):
        raise ConfigError("sync expert has not been trained")
    if generated_window.dim() == 4:
        generated_window, mel = generated_window.unsqueeze(0), mel.unsqueeze(0)
    face = stack_window(crop_lower_half(generated_window))
    score = sync_score(expert.embed_video(face), expert.embed_audio(mel))
    return -torch.log(score).mean()


# ---------- composition ----------

def weighted_total(recon: Number, sync: Number, lpips_val: Number, weights: LossWeights) -> Number:
    return weights.recon * recon + weights.alpha * sync + weights.beta * lpips_val


def total_loss(recon: Number, sync: Number, lpips_val: Number, weights: LossWeights) -> LossReport:
    """Combine scalar loss terms into a LossReport (tensors are read with .item())."""
    if not isinstance(weights, LossWeights):
        raise ContractError("total_loss needs LossWeights")
    r, s, p = (float(v.detach().item()) if isinstance(v, torch.Tensor) else float(v) for v in (recon, sync, lpips_val))
    return LossReport(recon=r, sync=s, lpips=p, total=weighted_total(r, s, p, weights), weights=weights)
