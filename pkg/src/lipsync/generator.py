"""
The talking-face generator.

    masked target ⊕ reference (6×96×96) ─ face encoder ─► 256×6×6 ─┐
    mel chunk (1×80×16) ─ audio encoder ──────────────────► 256×6×6 ─┤
                                      semantic alignment cascade ◄───┘
    face decoder (U-Net up path, skips at 12², 24², 48²) ─► 3×96×96 in (0, 1)

T frames of a window are folded into the batch dimension; every frame is
generated independently.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from src.lipsync import storage
from src.lipsync.blocks import ConvBlock, ResidualCBAMBlock, SemanticAlign
from src.lipsync.config import GeneratorConfig
from src.lipsync.datapipe import mask_lower_half
from src.lipsync.exceptions import ContractError
from src.lipsync.logger import get_logger
from src.lipsync.models import EncoderOutput, TrainingWindow

log = get_logger(__name__)

CHECKPOINT_KIND = "generator"


def _expect(x: torch.Tensor, shape: tuple[int, ...], what: str) -> None:
    if x.dim() != len(shape) + 1 or tuple(x.shape[1:]) != shape:
        raise ContractError(f"{what} must be B×{'×'.join(map(str, shape))}, got {tuple(x.shape)}")


class FaceEncoder(nn.Module):
    """7×7 stem, then four stride-2 stages each followed by residual CBAM blocks."""

    def __init__(self, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.stem = ConvBlock(6, cfg.stem_width, 7, 1, 3)
        stages = []
        prev = cfg.stem_width
        for width in cfg.widths:
            stages.append(nn.Sequential(
                ConvBlock(prev, width, 3, 2, 1),
                *[ResidualCBAMBlock(width, cfg.cbam_reduction) for _ in range(cfg.blocks_per_stage)],
            ))
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, masked_target: torch.Tensor, reference: torch.Tensor) -> EncoderOutput:
        size = self.cfg.image_size
        _expect(masked_target, (3, size, size), "masked target")
        _expect(reference, (3, size, size), "reference")
        x = self.stem(torch.cat([masked_target, reference], dim=1))
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return EncoderOutput(bottleneck=outs[-1], skips=outs[:-1])


class AudioEncoder(nn.Module):
    """
    1×80×16 mel chunk → C×6×6. Frequency is halved three times (80→10) and
    time once (16→8); a final 5×3 valid convolution lands on 6×6.
    """

    def __init__(self, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        out = self.output_size(cfg.mel_bins, cfg.mel_steps)
        if out != (cfg.bottleneck_size, cfg.bottleneck_size):
            raise ContractError(
                f"audio encoder maps a {cfg.mel_bins}×{cfg.mel_steps} mel chunk to {out[0]}×{out[1]}, "
                f"but the face bottleneck is {cfg.bottleneck_size}×{cfg.bottleneck_size}"
            )
        c1, (c2, c3, c4, c5) = cfg.stem_width, cfg.widths
        self.net = nn.Sequential(
            ConvBlock(1, c1, 3, 1, 1),
            ConvBlock(c1, c2, 3, (2, 1), 1),
            ConvBlock(c2, c3, 3, (2, 1), 1),
            ConvBlock(c3, c4, 3, (2, 2), 1),
            ConvBlock(c4, c5, (5, 3), 1, 0),
            nn.Conv2d(c5, c5, 1),
        )

    @staticmethod
    def output_size(bins: int, steps: int) -> tuple[int, int]:
        h, w = bins, steps
        for sh, sw in ((2, 1), (2, 1), (2, 2)):
            h, w = (h - 1) // sh + 1, (w - 1) // sw + 1
        return h - 4, w - 2

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        _expect(mel, (1, self.cfg.mel_bins, self.cfg.mel_steps), "mel chunk")
        return self.net(mel)


class AlignmentCascade(nn.Module):
    """n independent SemanticAlign modules applied in sequence, each fed the same audio latent."""

    def __init__(self, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.modules_ = nn.ModuleList(
            SemanticAlign(cfg.bottleneck_channels, cfg.ffc_global_ratio) for _ in range(cfg.n_align_modules)
        )
        self.calls = 0

    def forward(self, v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        for module in self.modules_:
            v = module(v, a)
            self.calls += 1
        return v


class ConcatFusion(nn.Module):
    """Ablation without alignment: concatenate visual and audio maps, 1×1 conv back to C."""

    def __init__(self, cfg: GeneratorConfig) -> None:
        super().__init__()
        c = cfg.bottleneck_channels
        self.proj = ConvBlock(2 * c, c, 1, 1, 0)

    def forward(self, v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([v, a], dim=1))


class _UpStage(nn.Module):
    def __init__(self, cin: int, cout: int, skip: int, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose2d(cin, cout, kernel_size=4, stride=2, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
        )
        self.merge = ConvBlock(cout + skip, cout, 3, 1, 1)
        self.blocks = nn.Sequential(*[ResidualCBAMBlock(cout, cfg.cbam_reduction) for _ in range(cfg.blocks_per_stage)])

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor]) -> torch.Tensor:
        x = self.up(x)
        if skip is not None:
            if skip.shape[-2:] != x.shape[-2:]:
                raise ContractError(f"skip {tuple(skip.shape)} does not match decoder stage {tuple(x.shape)}")
            x = torch.cat([x, skip], dim=1)
        return self.blocks(self.merge(x))


class FaceDecoder(nn.Module):
    """
    Four transposed-conv stages (6→12→24→48→96). The first three concatenate
    the encoder skips at 12², 24², 48²; the full-resolution stage has no skip.
    1×1 conv + sigmoid head.
    """

    def __init__(self, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        w0, w1, w2, w3 = cfg.widths
        self.stages = nn.ModuleList([
            _UpStage(w3, w2, w2, cfg),
            _UpStage(w2, w1, w1, cfg),
            _UpStage(w1, w0, w0, cfg),
            _UpStage(w0, cfg.stem_width, 0, cfg),
        ])
        self.head = nn.Conv2d(cfg.stem_width, 3, 1)

    def forward(self, fused: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        size = self.cfg.bottleneck_size
        _expect(fused, (self.cfg.bottleneck_channels, size, size), "fused bottleneck")
        if len(skips) != 3:
            raise ContractError(f"decoder expects 3 skips, got {len(skips)}")
        x = fused
        for stage, skip in zip(self.stages, [skips[2], skips[1], skips[0], None]):
            x = stage(x, skip)
        return torch.sigmoid(self.head(x))


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.face_encoder = FaceEncoder(cfg)
        self.audio_encoder = AudioEncoder(cfg)
        self.fusion = AlignmentCascade(cfg) if cfg.fusion == "align" else ConcatFusion(cfg)
        self.face_decoder = FaceDecoder(cfg)

    @property
    def align_calls(self) -> int:
        """Semantic-alignment invocations since construction (0 for concat fusion)."""
        return getattr(self.fusion, "calls", 0)

    # ---------- stages ----------

    def encode_face(self, masked_target: torch.Tensor, reference: torch.Tensor) -> EncoderOutput:
        return self.face_encoder(masked_target, reference)

    def encode_audio(self, mel: torch.Tensor) -> torch.Tensor:
        return self.audio_encoder(mel)

    def fuse(self, v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        size = self.cfg.bottleneck_size
        expected = (self.cfg.bottleneck_channels, size, size)
        _expect(v, expected, "visual bottleneck")
        _expect(a, expected, "audio latent")
        return self.fusion(v, a)

    def decode_face(self, fused: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        return self.face_decoder(fused, skips)

    def forward(self, masked_target: torch.Tensor, reference: torch.Tensor, mel: torch.Tensor) -> torch.Tensor:
        enc = self.encode_face(masked_target, reference)
        fused = self.fuse(enc.bottleneck, self.encode_audio(mel))
        return self.decode_face(fused, enc.skips)

    # ---------- windows ----------

    def generate(self, target: torch.Tensor, reference: torch.Tensor, mels: torch.Tensor) -> torch.Tensor:
        """
        Generate every frame of a batch of windows.

        Args:
            target: B × T × 3 × H × W ground-truth frames (masked here).
            reference: B × T × 3 × H × W reference frames.
            mels: B × T × 1 × bins × steps per-frame chunks, or B × 1 × bins × steps
                  (one chunk shared by all frames).
        Returns:
            B × T × 3 × H × W frames in (0, 1).
        """
        if target.dim() != 5 or reference.shape != target.shape:
            raise ContractError(f"target/reference must be matching B×T×3×H×W, got {tuple(target.shape)} / {tuple(reference.shape)}")
        b, t = target.shape[:2]
        if mels.dim() == 4:
            mels = mels.unsqueeze(1).expand(b, t, *mels.shape[1:])
        if mels.shape[:2] != (b, t):
            raise ContractError(f"mel chunks {tuple(mels.shape)} do not match {b} windows of {t} frames")
        fold = lambda x: x.reshape(b * t, *x.shape[2:])  # noqa: E731
        out = self(mask_lower_half(fold(target)), fold(reference), fold(mels))
        return out.reshape(b, t, *out.shape[1:])

    def generate_window(self, window: TrainingWindow) -> torch.Tensor:
        """T × 3 × H × W frames for one window (frame mels when present, else the window mel)."""
        param = next(self.parameters())
        as_t = lambda a: torch.as_tensor(a, dtype=param.dtype, device=param.device).unsqueeze(0)  # noqa: E731
        mels = window.frame_mels if window.frame_mels is not None else window.mel.values
        return self.generate(as_t(window.target), as_t(window.reference), as_t(mels))[0]


# ---------- checkpoints ----------

def save_generator(path: Path, generator: Generator, data_config_hash: str, step: int = 0,
                   optimizer_state: Optional[dict] = None, rng_state: Optional[dict] = None) -> Path:
    return storage.save_checkpoint(
        path, CHECKPOINT_KIND, asdict(generator.cfg), generator.state_dict(),
        data_config_hash, step=step, optimizer_state=optimizer_state, rng_state=rng_state,
    )


def load_generator(path: Path, data_config_hash: Optional[str] = None,
                   expected: Optional[GeneratorConfig] = None) -> tuple[Generator, dict]:
    """Rebuild a generator from the config embedded in its checkpoint."""
    payload = storage.load_checkpoint(
        path, CHECKPOINT_KIND,
        expected_config=asdict(expected) if expected is not None else None,
        data_config_hash=data_config_hash,
    )
    generator = Generator(GeneratorConfig(**payload["config"]))
    generator.load_state_dict(payload["state_dict"])
    log.info("loaded generator '%s' (step %d, %d alignment modules)",
             path.name, payload["step"], generator.cfg.n_align_modules)
    return generator, payload
