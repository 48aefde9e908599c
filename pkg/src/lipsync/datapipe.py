"""
audio/video ingestion: log-mel spectrograms, lower-half masking, training
windows, the synthetic toy corpus, and the on-disk dataset layout.

Dataset layout:
    <root>/<video_id>/frames/00000.png ...   96×96 RGB face crops
    <root>/<video_id>/audio.wav              16 kHz mono, 16-bit PCM
    <root>/<video_id>/mel.f32 + mel.meta     cached spectrogram (see storage)

Everything here is a pure function of its inputs and seed, so windows can be
extracted from several worker threads without changing the result.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import librosa
import numpy as np
import soundfile as sf
import torch
from PIL import Image
from scipy import stats
from torch.utils.data import Dataset

from src.lipsync import storage
from src.lipsync.config import WindowConfig
from src.lipsync.exceptions import DatasetError, InputError
from src.lipsync.logger import get_logger
from src.lipsync.models import MelChunk, TrainingWindow, VideoClip

log = get_logger(__name__)

# Synthetic corpus constants (96-pixel geometry, scaled with image_size).
TONE_LOW_HZ = 300.0
TONE_HIGH_HZ = 2400.0
MOUTH_MIN_PX = 2
MOUTH_MAX_PX = 22
MOUTH_RGB = (0.55, 0.08, 0.12)
_TONE_AMPLITUDE = 0.5


# ---------- audio ----------

@lru_cache(maxsize=8)
def _mel_basis(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)


def mel_filter_centers(cfg: WindowConfig) -> np.ndarray:
    """Centre frequency (Hz) of every mel filter."""
    return librosa.mel_frequencies(n_mels=cfg.mel_bins + 2, fmin=cfg.mel_fmin, fmax=cfg.mel_fmax)[1:-1]


def mel_spectrogram(waveform: np.ndarray, cfg: WindowConfig, sample_rate: Optional[int] = None) -> np.ndarray:
    """
    Log-mel spectrogram, mel_bins × n_steps with n_steps = len // hop + 1.

    Frames are centred (reflect-free zero padding), magnitude STFT with a Hann
    window of mel_win seconds, Slaney mel filterbank, log10 with a floor.

    Raises:
        InputError for empty, multi-channel or too-short audio, or a sample
        rate other than cfg.sample_rate (audio is never resampled).
    """
    sr = cfg.sample_rate if sample_rate is None else sample_rate
    if sr != cfg.sample_rate:
        raise InputError(f"sample rate {sr} Hz does not match the configured {cfg.sample_rate} Hz")
    wav = np.asarray(waveform, dtype=np.float32)
    if wav.size == 0:
        raise InputError("empty waveform")
    if wav.ndim != 1:
        raise InputError(f"expected mono audio, got shape {wav.shape}")
    if wav.shape[0] < cfg.win_samples:
        raise InputError(f"waveform shorter than one analysis window ({wav.shape[0]} < {cfg.win_samples} samples)")

    spec = np.abs(
        librosa.stft(
            wav,
            n_fft=cfg.win_samples,
            hop_length=cfg.hop_samples,
            win_length=cfg.win_samples,
            window="hann",
            center=True,
            pad_mode="constant",
        )
    )
    mel = _mel_basis(cfg.sample_rate, cfg.win_samples, cfg.mel_bins, cfg.mel_fmin, cfg.mel_fmax) @ spec
    return np.log10(np.maximum(cfg.log_floor, mel)).astype(np.float32)


def mel_chunk_start(frame_index: int, cfg: WindowConfig) -> int:
    """Mel step at which video frame `frame_index` begins."""
    return int(np.floor(frame_index / cfg.fps / cfg.mel_hop + 1e-9))


def crop_mel(mel: np.ndarray, frame_index: int, cfg: WindowConfig) -> Optional[MelChunk]:
    """Chunk of mel_steps_per_window steps starting at a frame, or None if it runs off either end."""
    start = mel_chunk_start(frame_index, cfg)
    steps = cfg.mel_steps_per_window
    if frame_index < 0 or start + steps > mel.shape[1]:
        return None
    return MelChunk(values=mel[None, :, start:start + steps].copy(), start_frame=frame_index)


def centred_mel_chunk(mel: np.ndarray, frame_index: int, cfg: WindowConfig) -> np.ndarray:
    """1 × bins × steps chunk centred on a frame (starting T//2 frames earlier), clamped into the spectrogram."""
    steps = cfg.mel_steps_per_window
    last_start = max(0, mel.shape[1] - steps)
    start = min(max(0, mel_chunk_start(frame_index - cfg.T // 2, cfg)), last_start)
    return mel[None, :, start:start + steps]


def frame_mel_chunks(mel: np.ndarray, first_frame: int, cfg: WindowConfig) -> np.ndarray:
    """One centred chunk per frame of the window starting at `first_frame`."""
    chunks = [centred_mel_chunk(mel, i, cfg) for i in range(first_frame, first_frame + cfg.T)]
    return np.stack(chunks).astype(np.float32)


# ---------- video ----------

def mask_lower_half(frame):
    """
    Zero every pixel row at index >= H/2. Works on numpy arrays and torch
    tensors of shape (..., H, W); the input is not modified.
    """
    out = frame.clone() if isinstance(frame, torch.Tensor) else np.array(frame, copy=True)
    out[..., frame.shape[-2] // 2:, :] = 0
    return out


def extract_windows(
    frames: np.ndarray,
    mel: np.ndarray,
    cfg: WindowConfig,
    seed: int,
    video_id: str = "",
    workers: int = 0,
) -> list[TrainingWindow]:
    """
    Every target start t with a complete window mel gets one window whose
    reference start is drawn (from an RNG keyed on (seed, t)) among starts at
    least T frames away. Targets with no such reference are skipped.

    Too-short videos (< 2T frames) yield no windows and a warning.
    """
    T = cfg.T
    n = int(frames.shape[0])
    if n < 2 * T:
        log.warning("skipping video '%s': %d frames < %d needed for a disjoint reference", video_id, n, 2 * T)
        return []

    def one(t: int) -> Optional[TrainingWindow]:
        chunk = crop_mel(mel, t, cfg)
        if chunk is None:
            return None
        candidates = [r for r in range(n - T + 1) if abs(r - t) >= T]
        if not candidates:
            return None
        rng = np.random.default_rng([seed, t])
        r = candidates[int(rng.integers(len(candidates)))]
        return TrainingWindow(
            video_id=video_id,
            target=frames[t:t + T],
            reference=frames[r:r + T],
            mel=chunk,
            target_start=t,
            reference_start=r,
            frame_mels=frame_mel_chunks(mel, t, cfg),
        )

    starts = range(n - T + 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, starts))
    else:
        results = [one(t) for t in starts]
    return [w for w in results if w is not None]


def video_seed(seed: int, video_index: int) -> int:
    return int(np.random.SeedSequence([seed, video_index]).generate_state(1)[0])


def build_windows(
    clips: Sequence[VideoClip],
    cfg: WindowConfig,
    seed: int,
    workers: int = 0,
    max_windows: Optional[int] = None,
) -> list[TrainingWindow]:
    windows: list[TrainingWindow] = []
    for i, clip in enumerate(clips):
        windows.extend(extract_windows(clip.frames, clip.mel, cfg, video_seed(seed, i), clip.video_id, workers))
    if max_windows is not None and len(windows) > max_windows:
        # evenly spread so every video stays represented
        keep = np.linspace(0, len(windows) - 1, max_windows).round().astype(int)
        windows = [windows[k] for k in keep]
    log.info("built %d windows from %d videos", len(windows), len(clips))
    return windows


# ---------- synthetic corpus ----------

@dataclass(slots=True)
class ToyDataset:
    clips: list[VideoClip]
    windows: list[TrainingWindow] = field(default_factory=list)


def mouth_height_for(frequency_hz: np.ndarray | float) -> np.ndarray:
    """Closed-form mouth height (pixels at 96-pixel scale) for a tone frequency; non-decreasing."""
    f = np.clip(np.asarray(frequency_hz, dtype=np.float64), TONE_LOW_HZ, TONE_HIGH_HZ)
    frac = (f - TONE_LOW_HZ) / (TONE_HIGH_HZ - TONE_LOW_HZ)
    return np.round(MOUTH_MIN_PX + frac * (MOUTH_MAX_PX - MOUTH_MIN_PX)).astype(np.int64)


def _tone(frequencies: np.ndarray, cfg: WindowConfig) -> np.ndarray:
    samples_per_frame = int(round(cfg.sample_rate / cfg.fps))
    inst = np.repeat(frequencies, samples_per_frame)
    phase = 2.0 * np.pi * np.cumsum(inst) / cfg.sample_rate
    return (_TONE_AMPLITUDE * np.sin(phase)).astype(np.float32)


def delay_audio(waveform: np.ndarray, frames: int, cfg: WindowConfig) -> np.ndarray:
    """Shift audio later by whole video frames, keeping its length (silence enters at the front)."""
    shift = frames * int(round(cfg.sample_rate / cfg.fps))
    if shift <= 0:
        return waveform.copy()
    return np.concatenate([np.zeros(shift, dtype=waveform.dtype), waveform])[: waveform.shape[0]]


def _render_faces(rng: np.random.Generator, heights: np.ndarray, size: int) -> np.ndarray:
    s = size / 96.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    background = rng.uniform(0.10, 0.40, 3)
    skin = rng.uniform(0.55, 0.85, 3)
    eye = rng.uniform(0.10, 0.25, 3)
    cx = rng.uniform(46, 50) * s
    cy = rng.uniform(44, 50) * s
    rx = rng.uniform(30, 36) * s
    ry = rng.uniform(38, 44) * s
    mouth_row = rng.uniform(68, 72) * s
    mouth_half_width = rng.uniform(11, 15) * s

    base = np.empty((3, size, size), dtype=np.float32)
    base[:] = background[:, None, None]
    face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    base[:, face] = skin[:, None]
    for ex in (cx - 14 * s, cx + 14 * s):
        eye_mask = (xx - ex) ** 2 + (yy - (cy - 12 * s)) ** 2 <= (4 * s) ** 2
        base[:, eye_mask] = eye[:, None]

    frames = np.repeat(base[None], len(heights), axis=0)
    col0, col1 = int(round(cx - mouth_half_width)), int(round(cx + mouth_half_width))
    mouth = np.asarray(MOUTH_RGB, dtype=np.float32)[:, None, None]
    for i, h in enumerate(heights):
        h_px = max(1, int(round(h * s)))
        top = int(round(mouth_row - h_px / 2))
        frames[i, :, top:top + h_px, col0:col1] = mouth
    return frames


def make_synthetic_clip(
    video_index: int,
    seed: int,
    cfg: WindowConfig,
    n_frames: int = 60,
    delay_frames: int = 0,
) -> VideoClip:
    rng = np.random.default_rng([seed, video_index])
    frequencies = rng.uniform(TONE_LOW_HZ, TONE_HIGH_HZ, n_frames)
    heights = mouth_height_for(frequencies)
    frames = _render_faces(rng, heights, cfg.image_size)
    waveform = delay_audio(_tone(frequencies, cfg), delay_frames, cfg)
    return VideoClip(
        video_id=f"toy{video_index:04d}",
        frames=frames,
        waveform=waveform,
        mel=mel_spectrogram(waveform, cfg),
        frequencies=frequencies,
        mouth_heights=heights,
    )


def make_synthetic_dataset(
    seed: int,
    n_videos: int,
    cfg: WindowConfig,
    n_frames: int = 60,
    delay_frames: int = 0,
    workers: int = 0,
) -> ToyDataset:
    """
    Cartoon faces whose mouth height tracks the instantaneous frequency of a
    tone (one frequency per video frame). The audio goes through
    mel_spectrogram like real data does.
    """
    if n_videos < 1:
        raise InputError(f"n_videos must be >= 1, got {n_videos}")
    clips = [make_synthetic_clip(v, seed, cfg, n_frames, delay_frames) for v in range(n_videos)]
    return ToyDataset(clips=clips, windows=build_windows(clips, cfg, seed, workers))


def measure_mouth_heights(frames: np.ndarray) -> np.ndarray:
    """Rows in the lower half that contain mouth-coloured pixels, per frame."""
    lower = frames[:, :, frames.shape[-2] // 2:, :]
    close = np.abs(lower - np.asarray(MOUTH_RGB, dtype=np.float32)[None, :, None, None]).max(axis=1) < 0.02
    return close.any(axis=-1).sum(axis=-1)


def dominant_mel_bins(mel: np.ndarray, n_frames: int, cfg: WindowConfig) -> np.ndarray:
    """Argmax mel bin of the spectrogram averaged over each video frame's time span."""
    out = np.zeros(n_frames, dtype=np.int64)
    for f in range(n_frames):
        a, b = mel_chunk_start(f, cfg), max(mel_chunk_start(f + 1, cfg), mel_chunk_start(f, cfg) + 1)
        out[f] = int(mel[:, a:b].mean(axis=1).argmax())
    return out


def mouth_audio_correlation(clips: Sequence[VideoClip], cfg: WindowConfig) -> float:
    """Pearson correlation of measured mouth height against the dominant mel bin, pooled over all frames."""
    heights, bins = [], []
    for clip in clips:
        heights.append(measure_mouth_heights(clip.frames))
        bins.append(dominant_mel_bins(clip.mel, clip.n_frames, cfg))
    r, _ = stats.pearsonr(np.concatenate(heights), np.concatenate(bins))
    return float(r)


def shuffle_audio(clips: Sequence[VideoClip], seed: int) -> list[VideoClip]:
    """Pair every video with another video's audio (a rotation, so nobody keeps their own)."""
    if len(clips) < 2:
        raise InputError("shuffling audio needs at least two videos")
    k = int(np.random.default_rng(seed).integers(1, len(clips)))
    out = []
    for i, clip in enumerate(clips):
        donor = clips[(i + k) % len(clips)]
        n = min(clip.n_frames, donor.n_frames)
        out.append(VideoClip(
            video_id=f"{clip.video_id}+{donor.video_id}",
            frames=clip.frames[:n],
            waveform=donor.waveform,
            mel=donor.mel,
            frequencies=donor.frequencies,
            mouth_heights=clip.mouth_heights[:n] if clip.mouth_heights is not None else None,
        ))
    return out


# ---------- disk layout ----------

def read_frames(frames_dir: Path, cfg: WindowConfig) -> np.ndarray:
    paths = sorted(frames_dir.glob("*.png"))
    if not paths:
        raise DatasetError(f"no PNG frames in {frames_dir}")
    frames = []
    for p in paths:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[:2] != (cfg.image_size, cfg.image_size):
            raise DatasetError(f"frame {p.name} is {arr.shape[1]}x{arr.shape[0]}, expected {cfg.image_size}x{cfg.image_size}")
        frames.append(arr.transpose(2, 0, 1))
    return np.stack(frames)


def read_audio(path: Path, cfg: WindowConfig) -> np.ndarray:
    try:
        wav, sr = sf.read(str(path), dtype="float32", always_2d=False)
    except (RuntimeError, OSError) as exc:
        raise InputError(f"cannot read audio: {path}") from exc
    if wav.ndim != 1:
        raise InputError(f"audio must be mono: {path}")
    if sr != cfg.sample_rate:
        raise InputError(f"{path.name} is {sr} Hz; {cfg.sample_rate} Hz required (no resampling)")
    return wav


def write_frames(frames: np.ndarray, frames_dir: Path) -> None:
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        pixels = np.clip(np.round(frame.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(frames_dir / f"{i:05d}.png")


def write_video_dir(clip: VideoClip, root: Path, cfg: WindowConfig) -> Path:
    video_dir = root / clip.video_id
    write_frames(clip.frames, video_dir / "frames")
    sf.write(str(video_dir / "audio.wav"), clip.waveform, cfg.sample_rate, subtype="PCM_16")
    return video_dir


def load_video_dir(video_dir: Path, cfg: WindowConfig) -> VideoClip:
    frames = read_frames(video_dir / "frames", cfg)
    waveform = read_audio(video_dir / "audio.wav", cfg)
    cfg_hash = cfg.hash()
    mel = storage.load_mel_cache(video_dir, cfg_hash)
    if mel is None:
        mel = mel_spectrogram(waveform, cfg)
        storage.save_mel_cache(video_dir, mel, cfg_hash)
    return VideoClip(video_id=video_dir.name, frames=frames, waveform=waveform, mel=mel)


def load_dataset(root: Path, cfg: WindowConfig) -> list[VideoClip]:
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    video_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not video_dirs:
        raise DatasetError(f"dataset root has no video folders: {root}")
    clips = [load_video_dir(d, cfg) for d in video_dirs]
    log.info("loaded %d videos from '%s'", len(clips), root)
    return clips


def preprocess_dataset(root: Path, cfg: WindowConfig) -> int:
    """Compute (or refresh) the mel cache of every video under `root`; returns the video count."""
    return len(load_dataset(root, cfg))


# ---------- torch adapter ----------

class WindowDataset(Dataset):
    """Training windows as float32 tensors: target, reference, mel, frame_mels."""

    def __init__(self, windows: Sequence[TrainingWindow]) -> None:
        if not windows:
            raise DatasetError("no training windows")
        self.windows = list(windows)

    def __len__(self) -> int:
        return len(self.windows)

    def __getitem__(self, index: int) -> dict[str, torch.Tensor]:
        w = self.windows[index]
        frame_mels = w.frame_mels if w.frame_mels is not None else np.repeat(w.mel.values[None], w.target.shape[0], 0)
        return {
            "target": torch.from_numpy(w.target),
            "reference": torch.from_numpy(w.reference),
            "mel": torch.from_numpy(w.mel.values),
            "frame_mels": torch.from_numpy(np.ascontiguousarray(frame_mels)),
        }
