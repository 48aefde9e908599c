"""
run orchestration: expert pretraining, generator training, evaluation and inference.

Design goals:
- One process owns the parameters; every random draw comes from a seeded
  generator, so a fixed seed reproduces loss curves and outputs bit for bit.
- The sync expert and the perceptual backbone are frozen for the whole run.
- Checkpoints carry the window-config hash; evaluation and inference refuse
  a checkpoint produced under different audio/video windowing.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch.utils.data import default_collate

from src.lipsync import storage
from src.lipsync.config import RunConfig, WindowConfig, config_hash, seed_everything
from src.lipsync.datapipe import (
    WindowDataset,
    build_windows,
    centred_mel_chunk,
    load_dataset,
    mask_lower_half,
    mel_spectrogram,
    shuffle_audio,
    write_frames,
)
from src.lipsync.exceptions import (
    ConfigError,
    LipsyncError,
    MetricError,
    NonFiniteLossError,
    TrainingError,
    VideoTooShortError,
)
from src.lipsync.generator import Generator, load_generator, save_generator
from src.lipsync.logger import get_logger
from src.lipsync.losses import PerceptualLoss, build_backbone, recon_loss, sync_loss, total_loss, weighted_total
from src.lipsync.metrics import build_extractor, fid, lse_distances, pooled_lse
from src.lipsync.models import LossReport, LossWeights, VideoClip
from src.lipsync.syncexpert import ExpertResult, SyncExpert, SyncPairDataset, load_expert, save_expert, train_expert

log = get_logger(__name__)

GENERATOR_FILE = "generator.pt"
CURVE_FILE = "loss_curve.jsonl"
REPORT_FILE = "report.txt"


def _load_clips(run: RunConfig, clips: Optional[Sequence[VideoClip]]) -> list[VideoClip]:
    if clips is not None:
        return list(clips)
    return load_dataset(run.resolve(run.data.root), run.window)


def load_frozen_expert(run: RunConfig) -> SyncExpert:
    """
    Raises:
        ConfigError if no expert checkpoint exists at expert.checkpoint.
        CheckpointMismatchError if it was trained under another window config.
    """
    path = run.resolve(run.expert.checkpoint)
    if not path.is_file():
        raise ConfigError(f"sync expert checkpoint not found: {path} (run train-expert first)")
    return load_expert(path, data_config_hash=run.window.hash())


# ---------- expert ----------

def train_expert_run(run: RunConfig, clips: Optional[Sequence[VideoClip]] = None) -> ExpertResult:
    """Pretrain the sync expert on balanced pairs and save it to expert.checkpoint."""
    if run.expert.T != run.window.T:
        raise ConfigError(f"expert.T ({run.expert.T}) must equal window.T ({run.window.T})")
    clips = _load_clips(run, clips)
    pairs = SyncPairDataset(clips, run.window, run.expert.n_pairs, run.expert.seed, run.expert.min_offset)
    log.info("training sync expert on %d pairs from %d videos", len(pairs), len(clips))
    result = train_expert(pairs, run.expert, run.window)
    save_expert(run.resolve(run.expert.checkpoint), result.expert, run.window.hash(), result.accuracy)
    log.info("sync expert holdout accuracy %.3f", result.accuracy)
    return result


# ---------- generator ----------

@dataclass(slots=True)
class TrainResult:
    checkpoint: Path
    curve_path: Path
    curve: list[dict] = field(default_factory=list)
    steps: int = 0


class GeneratorTrainer:
    """Single-writer generator training loop with resumable checkpoints."""

    def __init__(self, run: RunConfig, clips: Optional[Sequence[VideoClip]] = None,
                 expert: Optional[SyncExpert] = None) -> None:
        self.run = run
        self.cfg = run.trainer
        self.out_dir = run.resolve(self.cfg.output_dir)
        self.checkpoint_path = self.out_dir / GENERATOR_FILE
        self.curve_path = self.out_dir / CURVE_FILE
        self.data_hash = run.window.hash()

        self.expert = expert if expert is not None else load_frozen_expert(run)
        if not bool(self.expert.trained):
            raise ConfigError("sync expert has not been trained")

        clips = _load_clips(run, clips)
        windows = build_windows(clips, run.window, self.cfg.seed, run.data.workers, run.data.max_windows)
        self.dataset = WindowDataset(windows)

        seed_everything(self.cfg.seed)
        self.generator = Generator(run.generator_config())
        self.optimizer = torch.optim.Adam(self.generator.parameters(), lr=self.cfg.learning_rate)
        self.perceptual = PerceptualLoss(build_backbone(run.lpips)) if self.cfg.use_lpips else None
        self.weights = LossWeights.from_config(self.cfg)
        self.sampler = torch.Generator().manual_seed(self.cfg.seed)
        self.start_step = 0

    # ---------- state ----------

    def _rng_state(self) -> dict:
        return {
            "torch": torch.get_rng_state(),
            "sampler": self.sampler.get_state(),
            "numpy": np.random.get_state(),
            "python": random.getstate(),
        }

    def _restore_rng(self, state: dict) -> None:
        torch.set_rng_state(state["torch"])
        self.sampler.set_state(state["sampler"])
        np.random.set_state(state["numpy"])
        random.setstate(state["python"])

    def _save_checkpoint(self, step: int) -> Path:
        return save_generator(
            self.checkpoint_path, self.generator, self.data_hash, step=step,
            optimizer_state=self.optimizer.state_dict(), rng_state=self._rng_state(),
        )

    def _try_resume(self) -> None:
        if not self.checkpoint_path.exists():
            log.info("resume requested but no checkpoint in '%s'; starting fresh", self.out_dir)
            return
        payload = storage.load_checkpoint(
            self.checkpoint_path, "generator",
            expected_config=asdict(self.generator.cfg),
            data_config_hash=self.data_hash,
        )
        self.generator.load_state_dict(payload["state_dict"])
        if payload["optimizer_state"] is not None:
            self.optimizer.load_state_dict(payload["optimizer_state"])
        if payload["rng_state"] is not None:
            self._restore_rng(payload["rng_state"])
        self.start_step = int(payload["step"])
        storage.truncate_loss_curve(self.curve_path, self.start_step - 1)
        log.info("resumed from step %d", self.start_step)

    # ---------- steps ----------

    def _batch(self) -> dict[str, torch.Tensor]:
        idx = torch.randint(len(self.dataset), (self.cfg.batch_size,), generator=self.sampler)
        return default_collate([self.dataset[i] for i in idx.tolist()])

    def _dump_batch(self, step: int, batch: dict, terms: dict) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"nonfinite_step{step:06d}.pt"
        torch.save({"step": step, "batch": batch, "terms": terms}, path)
        return path

    def _audit_frozen(self) -> None:
        frozen = list(self.expert.parameters())
        if self.perceptual is not None:
            frozen += list(self.perceptual.parameters())
        leaked = [p for p in frozen if p.grad is not None or p.requires_grad]
        if leaked:
            raise TrainingError(f"{len(leaked)} frozen parameter(s) received gradients")

    def step(self, step: int) -> LossReport:
        batch = self._batch()
        self.generator.train()
        target = batch["target"]
        generated = self.generator.generate(target, batch["reference"], batch["frame_mels"])

        recon = recon_loss(generated, target)
        sync = sync_loss(generated, batch["mel"], self.expert)
        perceptual = self.perceptual(generated, target) if self.perceptual is not None else generated.new_zeros(())
        total = weighted_total(recon, sync, perceptual, self.weights)

        if not torch.isfinite(total):
            terms = {"recon": recon.item(), "sync": sync.item(), "lpips": perceptual.item()}
            dump = self._dump_batch(step, batch, terms)
            raise NonFiniteLossError(f"non-finite loss at step {step} {terms}; batch saved to {dump}", dump)

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.generator.parameters(), self.cfg.grad_clip)
        if self.cfg.audit_frozen:
            self._audit_frozen()
        self.optimizer.step()
        return total_loss(recon, sync, perceptual, self.weights)

    def train(self) -> TrainResult:
        """
        Raises:
            NonFiniteLossError if a loss becomes NaN/inf.
            TrainingError for unexpected failures.
        """
        try:
            if self.cfg.resume:
                self._try_resume()
            writer = storage.LossCurveWriter(self.curve_path, append=self.start_step > 0)
            result = TrainResult(checkpoint=self.checkpoint_path, curve_path=self.curve_path)
            log.info("training generator: %d windows, steps %d..%d, alpha=%.3f beta=%.3f, %d alignment modules",
                     len(self.dataset), self.start_step, self.cfg.max_steps,
                     self.weights.alpha, self.weights.beta, self.generator.cfg.n_align_modules)

            for step in range(self.start_step, self.cfg.max_steps):
                report = self.step(step)
                writer.write(step, report)
                result.curve.append(report.to_record(step))
                done = step + 1
                if done % self.cfg.eval_every == 0 or done == self.cfg.max_steps:
                    log.info("step %d: total=%.4f recon=%.4f sync=%.4f lpips=%.4f",
                             step, report.total, report.recon, report.sync, report.lpips)
                    self._save_checkpoint(done)
            result.steps = self.cfg.max_steps
            if self.start_step >= self.cfg.max_steps and not self.checkpoint_path.exists():
                self._save_checkpoint(self.start_step)
            return result

        except LipsyncError:
            raise
        except Exception as exc:
            log.exception("unexpected error while training the generator")
            raise TrainingError("Generator training failed due to an unexpected error.") from exc


def train_generator(run: RunConfig, clips: Optional[Sequence[VideoClip]] = None,
                    expert: Optional[SyncExpert] = None) -> TrainResult:
    return GeneratorTrainer(run, clips, expert).train()


# ---------- rendering ----------

def reference_indices(centres: Sequence[int], n: int, T: int) -> list[int]:
    """
    Reference source frame for each output frame: (i + max(T, n // 2)) mod n.
    Clips shorter than 2T cannot keep every reference T frames away; a shift
    that wraps onto the target itself falls back to n // 2.
    """
    shift = max(T, n // 2)
    if n < 2 * T:
        log.warning("clip has %d frames < %d: some references lie closer than %d frames to their target", n, 2 * T, T)
        if shift % n == 0 and n > 1:
            shift = n // 2
    return [(i + shift) % n for i in centres]


@torch.no_grad()
def render_frames(generator: Generator, frames: np.ndarray, mel: np.ndarray, cfg: WindowConfig,
                  centres: Sequence[int], batch_size: int = 16) -> np.ndarray:
    """
    Generate the lower half of frames[centres] and paste it over the source
    frame. Frame i is driven by its centred mel chunk and references the
    source frame picked by reference_indices.
    """
    generator.eval()
    half = frames.shape[-2] // 2
    out = []
    centres = list(centres)
    references = reference_indices(centres, len(frames), cfg.T)
    for k in range(0, len(centres), batch_size):
        chunk = centres[k:k + batch_size]
        target = torch.from_numpy(np.ascontiguousarray(frames[chunk], dtype=np.float32))
        reference = torch.from_numpy(np.ascontiguousarray(frames[references[k:k + batch_size]], dtype=np.float32))
        mels = torch.from_numpy(np.stack([centred_mel_chunk(mel, i, cfg) for i in chunk]).astype(np.float32))
        generated = generator(mask_lower_half(target), reference, mels).numpy()
        composite = target.numpy().copy()
        composite[..., half:, :] = generated[..., half:, :]
        out.append(composite)
    return np.concatenate(out) if out else np.zeros((0, *frames.shape[1:]), dtype=np.float32)


# ---------- evaluation ----------

def evaluate(run: RunConfig, clips: Optional[Sequence[VideoClip]] = None,
             checkpoint: Optional[Path] = None) -> dict:
    """
    LSE-C / LSE-D (pooled over every window of every video) and FID between
    the source frames and the evaluated frames; writes the metrics report.

    Raises:
        CheckpointMismatchError if the generator checkpoint was trained under
        another window config.
        MetricError if no video is long enough, or on unexpected failures.
    """
    ecfg = run.evaluate
    window = run.window
    data_hash = window.hash()
    try:
        clips = _load_clips(run, clips)
        if ecfg.shuffle_audio:
            clips = shuffle_audio(clips, run.data.seed)
        expert = load_frozen_expert(run)

        generator = None
        ckpt_path = checkpoint or run.resolve(ecfg.checkpoint)
        if ecfg.source == "generated":
            generator, _ = load_generator(ckpt_path, data_config_hash=data_hash)

        tables, real, evaluated = [], [], []
        offsets = np.arange(-ecfg.max_offset, ecfg.max_offset + 1)
        for clip in clips:
            frames = clip.frames
            if generator is not None:
                frames = render_frames(generator, clip.frames, clip.mel, window, range(clip.n_frames))
            try:
                distances, offsets = lse_distances(frames, clip.mel, expert, window, ecfg.max_offset)
            except VideoTooShortError as exc:
                log.warning("skipping '%s' for lse: %s", clip.video_id, exc)
                continue
            tables.append(distances)
            real.append(clip.frames)
            evaluated.append(frames)

        scores = pooled_lse(tables, offsets)
        fid_value = fid(np.concatenate(real), np.concatenate(evaluated), build_extractor(ecfg.extractor))

        report = {
            "lse_c": scores.lse_c,
            "lse_d": scores.lse_d,
            "fid": fid_value,
            "n_videos": len(tables),
            "n_windows": scores.n_windows,
            "n_frames": int(sum(len(f) for f in evaluated)),
            "config_hash": data_hash,
            "run_config_hash": config_hash({k: v for k, v in run.to_dict().items() if k != "workspace"}),
            "source": ecfg.source,
            "shuffle_audio": ecfg.shuffle_audio,
            "checkpoint": str(ckpt_path) if generator is not None else "",
            "n_align_modules": generator.cfg.n_align_modules if generator is not None else 0,
            "max_offset": ecfg.max_offset,
            "extractor": ecfg.extractor,
        }
        storage.write_report(run.resolve(ecfg.output_dir) / REPORT_FILE, report)
        log.info("evaluated %d videos: lse_c=%.4f lse_d=%.4f fid=%.4f",
                 report["n_videos"], report["lse_c"], report["lse_d"], report["fid"])
        return report

    except LipsyncError:
        raise
    except Exception as exc:
        log.exception("unexpected error during evaluation")
        raise MetricError("Evaluation failed due to an unexpected error.") from exc


# ---------- inference ----------

def infer(run: RunConfig, frames: np.ndarray, waveform: np.ndarray,
          checkpoint: Optional[Path] = None, output_dir: Optional[Path] = None) -> np.ndarray:
    """
    Lip-sync a face-crop video to new audio.

    Output frame j is the source frame j + T//2 with a generated lower half,
    for j in 0 .. N - T where N is the shorter of the two streams (in frames).
    Frames are written as PNGs when `output_dir` is given.

    Raises:
        VideoTooShortError when fewer than T frames remain.
        InputError for unusable audio.
        CheckpointError / CheckpointMismatchError for a bad checkpoint.
    """
    window = run.window
    T = window.T
    n_audio = int(np.floor(len(waveform) / window.sample_rate * window.fps + 1e-9))
    n = min(len(frames), n_audio)
    if n != len(frames) or n != n_audio:
        log.warning("video has %d frames and audio covers %d; truncating both to %d", len(frames), n_audio, n)
    if n < T:
        raise VideoTooShortError(f"inference needs at least {T} frames, got {n}", minimum_frames=T)

    generator, _ = load_generator(checkpoint or run.resolve(run.infer.checkpoint), data_config_hash=window.hash())
    samples = int(round(n * window.sample_rate / window.fps))
    mel = mel_spectrogram(waveform[:samples], window)
    out = render_frames(generator, frames[:n], mel, window, range(T // 2, n - T + 1 + T // 2))

    if output_dir is not None:
        write_frames(out, output_dir)
        log.info("wrote %d frames to '%s'", len(out), output_dir)
    return out
