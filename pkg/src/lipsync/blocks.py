"""
Differentiable building blocks shared by the generator.

- adain: per-channel statistics transfer from a style map onto a content map.
- SpectralTransform / FFC / FFCBlock: two-branch Fast Fourier Convolution;
  the global branch mixes channels pointwise in the 2-D real-FFT domain.
- CBAM / ResidualCBAMBlock: channel-then-spatial sigmoid gating.
- SemanticAlign: x + adain(FFCBlock(x), audio), the unit cascaded in the bottleneck.

Blocks accept B × C × H × W tensors; adain also takes a single C × H × W map.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.lipsync.exceptions import ContractError
from src.lipsync.models import AttentionMasks, ChannelStats

ADAIN_EPS = 1e-5
# added to the variance so the std's backward pass stays finite on constant maps
_VAR_EPS = 1e-12


def zero_init_(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def seeded_init_(module: nn.Module, seed: int) -> nn.Module:
    """He-normal conv weights and zero biases drawn from a private generator (same seed, same weights)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def channel_stats(x: torch.Tensor) -> ChannelStats:
    """Spatial mean and population std per channel."""
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return ChannelStats(mean=mean, std=torch.sqrt(var + _VAR_EPS))


def adain(x: torch.Tensor, y: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """
    σ(y) · (x − μ(x)) / (σ(x) + eps) + μ(y), statistics per channel over the
    spatial positions. Spatial sizes of x and y may differ.

    Raises:
        ContractError if x and y disagree on batch or channel count.
    """
    if x.dim() not in (3, 4) or y.dim() != x.dim():
        raise ContractError(f"adain expects two C×H×W or B×C×H×W maps, got {tuple(x.shape)} and {tuple(y.shape)}")
    if x.shape[:-2] != y.shape[:-2]:
        raise ContractError(f"adain channel mismatch: content {tuple(x.shape)} vs style {tuple(y.shape)}")
    sx, sy = channel_stats(x), channel_stats(y)
    return sy.std * (x - sx.mean) / (sx.std + eps) + sy.mean


class ConvBlock(nn.Module):
    """conv → batch norm → ReLU."""

    def __init__(self, cin: int, cout: int, kernel_size=3, stride=1, padding=1) -> None:
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size, stride, padding)
        self.norm = nn.BatchNorm2d(cout)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


# ---------- Fast Fourier Convolution ----------

class SpectralTransform(nn.Module):
    """
    rfft2 over H×W → real/imag stacked on channels → 1×1 conv → norm → act →
    back to complex → irfft2 to the input size. Orthonormal FFT scaling, so
    an identity 1×1 conv without norm/activation reproduces the input.
    """

    def __init__(self, in_channels: int, out_channels: int | None = None,
                 norm: bool = True, activation: bool = True) -> None:
        super().__init__()
        out_channels = out_channels or in_channels
        self.conv = nn.Conv2d(2 * in_channels, 2 * out_channels, kernel_size=1, bias=False)
        self.norm = nn.BatchNorm2d(2 * out_channels) if norm else nn.Identity()
        self.act = nn.ReLU() if activation else nn.Identity()

    def identity_(self) -> "SpectralTransform":
        if self.conv.in_channels != self.conv.out_channels:
            raise ContractError("identity spectral weights need equal in/out channels")
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, :, 0, 0] = torch.eye(self.conv.in_channels)
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h < 2 or w < 2:
            raise ContractError(f"spectral transform needs H, W >= 2, got {h}×{w}")
        spec = torch.fft.rfft2(x, norm="ortho")
        spec = torch.cat([spec.real, spec.imag], dim=1)
        spec = self.act(self.norm(self.conv(spec)))
        real, imag = spec.chunk(2, dim=1)
        return torch.fft.irfft2(torch.complex(real, imag), s=(h, w), norm="ortho")


class FFC(nn.Module):
    """
    Two-branch convolution. Channels are split into local (first) and global
    (last round(global_ratio·C)) groups:

        out_local  = conv_l2l(x_l) + conv_g2l(x_g)
        out_global = conv_l2g(x_l) + spectral(x_g)

    A branch with zero channels is dropped.
    """

    def __init__(self, in_channels: int, out_channels: int, global_ratio: float = 0.5,
                 kernel_size: int = 3, spectral_norm: bool = True, spectral_activation: bool = True) -> None:
        super().__init__()
        self.in_g = round(global_ratio * in_channels)
        self.in_l = in_channels - self.in_g
        self.out_g = round(global_ratio * out_channels)
        self.out_l = out_channels - self.out_g
        pad = kernel_size // 2

        def conv(cin: int, cout: int) -> nn.Module | None:
            return nn.Conv2d(cin, cout, kernel_size, padding=pad, bias=False) if cin and cout else None

        self.convl2l = conv(self.in_l, self.out_l)
        self.convl2g = conv(self.in_l, self.out_g)
        self.convg2l = conv(self.in_g, self.out_l)
        self.convg2g = (
            SpectralTransform(self.in_g, self.out_g, norm=spectral_norm, activation=spectral_activation)
            if self.in_g and self.out_g else None
        )

    def branches(self, x: torch.Tensor) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        if x.shape[1] != self.in_l + self.in_g:
            raise ContractError(f"FFC expects {self.in_l + self.in_g} channels, got {x.shape[1]}")
        x_l, x_g = x[:, :self.in_l], x[:, self.in_l:]
        out_l = out_g = None
        if self.out_l:
            parts = [m(t) for m, t in ((self.convl2l, x_l), (self.convg2l, x_g)) if m is not None]
            out_l = sum(parts) if parts else x.new_zeros(x.shape[0], self.out_l, *x.shape[-2:])
        if self.out_g:
            parts = [m(t) for m, t in ((self.convl2g, x_l), (self.convg2g, x_g)) if m is not None]
            out_g = sum(parts) if parts else x.new_zeros(x.shape[0], self.out_g, *x.shape[-2:])
        return out_l, out_g

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([t for t in self.branches(x) if t is not None], dim=1)


class FFCBlock(nn.Module):
    """FFC followed by batch norm + ReLU on each branch."""

    def __init__(self, in_channels: int, out_channels: int, global_ratio: float = 0.5) -> None:
        super().__init__()
        self.ffc = FFC(in_channels, out_channels, global_ratio)
        self.norm_l = nn.BatchNorm2d(self.ffc.out_l) if self.ffc.out_l else None
        self.norm_g = nn.BatchNorm2d(self.ffc.out_g) if self.ffc.out_g else None
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out_l, out_g = self.ffc.branches(x)
        outs = []
        if out_l is not None:
            outs.append(self.act(self.norm_l(out_l)))
        if out_g is not None:
            outs.append(self.act(self.norm_g(out_g)))
        return torch.cat(outs, dim=1)


# ---------- attention ----------

class CBAM(nn.Module):
    """
    Channel gate from a shared MLP over avg- and max-pooled descriptors, then a
    spatial gate from a 7×7 conv over the channel-wise avg/max maps of the
    channel-gated features.
    """

    def __init__(self, channels: int, reduction: int = 8, kernel_size: int = 7) -> None:
        super().__init__()
        if channels % reduction:
            raise ContractError(f"CBAM channels ({channels}) must be divisible by the reduction ratio ({reduction})")
        hidden = channels // reduction
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1),
        )
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def _channel_mask(self, x: torch.Tensor) -> torch.Tensor:
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))

    def _spatial_mask(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(pooled))

    def masks(self, x: torch.Tensor) -> AttentionMasks:
        channel = self._channel_mask(x)
        return AttentionMasks(channel=channel, spatial=self._spatial_mask(x * channel))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x * self._channel_mask(x)
        return x * self._spatial_mask(x)


class ResidualCBAMBlock(nn.Module):
    """x + CBAM(conv → BN → ReLU → conv)(x)."""

    def __init__(self, channels: int, reduction: int = 8) -> None:
        super().__init__()
        self.conv_stack = nn.Sequential(
            ConvBlock(channels, channels),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.cbam = CBAM(channels, reduction)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.cbam(self.conv_stack(x))


# ---------- audio-visual alignment ----------

class SemanticAlign(nn.Module):
    """Residual FFC → AdaIN unit: x + adain(FFCBlock(x), a)."""

    def __init__(self, channels: int, global_ratio: float = 0.5) -> None:
        super().__init__()
        self.ffc = FFCBlock(channels, channels, global_ratio)

    def branch(self, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        if x.shape != a.shape:
            raise ContractError(f"semantic alignment needs equal visual/audio shapes, got {tuple(x.shape)} and {tuple(a.shape)}")
        return adain(self.ffc(x), a)

    def forward(self, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return x + self.branch(x, a)
