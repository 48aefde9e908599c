"""
central configuration.

Paths are module constants resolved relative to the project root and are safe
to import anywhere (tests repoint them). Run settings are typed dataclass
sections loaded from one YAML file; `--set section.key=value` overrides are
applied after the file is parsed.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import torch
import yaml

from src.lipsync.exceptions import ConfigError

# Project root is two levels up from this file (src/lipsync/config.py)
BASE_DIR: Path = Path(__file__).resolve().parents[2]

# Runtime folders, created on demand elsewhere
LOGS_DIR: Path = BASE_DIR / "logs"
RUNS_DIR: Path = BASE_DIR / "runs"
DATA_DIR: Path = BASE_DIR / "data"

CHECKPOINT_FORMAT = "lipsync-ckpt/1"
SNAPSHOT_NAME = "config.snapshot.yaml"


def config_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON form, truncated to 16 hex chars."""
    if hasattr(payload, "__dataclass_fields__"):
        payload = asdict(payload)
    text = json.dumps(payload, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ---------- sections ----------

@dataclass(slots=True)
class WindowConfig:
    """
    Audio/video windowing shared by data, models and metrics.

    Attributes:
        T: frames per window.
        fps: video frame rate (Hz).
        image_size: face crop side in pixels.
        mel_bins: mel filterbank size.
        mel_hop: hop between mel steps (seconds).
        mel_win: analysis window (seconds).
        sample_rate: audio rate (Hz); audio at any other rate is rejected.
    """
    T: int = 5
    fps: float = 25.0
    image_size: int = 96
    mel_bins: int = 80
    mel_hop: float = 0.0125
    mel_win: float = 0.05
    sample_rate: int = 16_000
    mel_fmin: float = 55.0
    mel_fmax: float = 7600.0
    log_floor: float = 1e-5

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ConfigError(f"window.T must be >= 1, got {self.T}")
        if self.image_size % 16:
            raise ConfigError(f"window.image_size must be divisible by 16, got {self.image_size}")
        if self.fps <= 0 or self.mel_hop <= 0 or self.mel_win <= 0:
            raise ConfigError("window.fps, mel_hop and mel_win must be positive")

    @property
    def mel_steps_per_window(self) -> int:
        return round(self.T / self.fps / self.mel_hop)

    @property
    def hop_samples(self) -> int:
        return round(self.mel_hop * self.sample_rate)

    @property
    def win_samples(self) -> int:
        return round(self.mel_win * self.sample_rate)

    def hash(self) -> str:
        return config_hash(self)


@dataclass(slots=True)
class GeneratorConfig:
    """Generator architecture; embedded verbatim in generator checkpoints."""
    n_align_modules: int = 9
    stem_width: int = 32
    widths: tuple[int, ...] = (64, 128, 256, 256)
    blocks_per_stage: int = 2
    cbam_reduction: int = 8
    ffc_global_ratio: float = 0.5
    fusion: str = "align"
    T: int = 5
    image_size: int = 96
    mel_bins: int = 80
    mel_steps: int = 16

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        if not 1 <= self.n_align_modules <= 16:
            raise ConfigError(f"n_align_modules must be in 1..16, got {self.n_align_modules}")
        if len(self.widths) != 4:
            raise ConfigError(f"generator.widths needs 4 stages (96 -> 6), got {len(self.widths)}")
        if self.fusion not in ("align", "concat"):
            raise ConfigError(f"generator.fusion must be 'align' or 'concat', got {self.fusion!r}")
        if not 0.0 <= self.ffc_global_ratio <= 1.0:
            raise ConfigError("generator.ffc_global_ratio must be within [0, 1]")
        if any(w % self.cbam_reduction for w in (self.stem_width, *self.widths)):
            raise ConfigError(
                f"generator widths {(self.stem_width, *self.widths)} must be divisible by cbam_reduction={self.cbam_reduction}"
            )

    @property
    def bottleneck_channels(self) -> int:
        return self.widths[-1]

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 16

    def scaled(self, divisor: int) -> "GeneratorConfig":
        """Same topology with every width divided by `divisor` (used for gradient checks)."""
        return replace(
            self,
            stem_width=max(1, self.stem_width // divisor),
            widths=tuple(max(1, w // divisor) for w in self.widths),
        )


@dataclass(slots=True)
class ExpertConfig:
    embed_dim: int = 512
    width: int = 32
    T: int = 5
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    n_pairs: int = 2000
    min_offset: int = 3
    holdout: float = 0.2
    seed: int = 0
    checkpoint: str = "runs/expert/expert.pt"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("expert.learning_rate must be > 0")
        if self.batch_size < 2:
            raise ConfigError("expert.batch_size must be >= 2")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("expert.holdout must be within (0, 1)")


@dataclass(slots=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-4
    max_steps: int = 2000
    seed: int = 0
    alpha: float = 0.03
    beta: float = 0.07
    n_align_modules: int = 9
    use_lpips: bool = True
    eval_every: int = 500
    grad_clip: Optional[float] = None
    audit_frozen: bool = False
    resume: bool = False
    output_dir: str = "runs/train"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("trainer.learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("trainer.batch_size must be >= 1")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta >= 1:
            raise ConfigError(
                f"trainer.alpha/beta must be >= 0 with alpha + beta < 1, got {self.alpha}, {self.beta}"
            )
        if self.eval_every < 1:
            raise ConfigError("trainer.eval_every must be >= 1")


@dataclass(slots=True)
class DataConfig:
    root: str = "data/toy"
    n_videos: int = 8
    n_frames: int = 60
    max_windows: Optional[int] = None
    workers: int = 0
    seed: int = 0


@dataclass(slots=True)
class LpipsConfig:
    backbone: str = "tiny"          # tiny | identity | alexnet
    seed: int = 0

    def __post_init__(self) -> None:
        if self.backbone not in ("tiny", "identity", "alexnet"):
            raise ConfigError(f"lpips.backbone must be tiny, identity or alexnet, got {self.backbone!r}")


@dataclass(slots=True)
class EvalConfig:
    checkpoint: str = "runs/train/generator.pt"
    output_dir: str = "runs/evaluate"
    max_offset: int = 15
    extractor: str = "tiny"         # tiny | inception
    source: str = "generated"       # generated | ground_truth
    shuffle_audio: bool = False

    def __post_init__(self) -> None:
        if self.source not in ("generated", "ground_truth"):
            raise ConfigError(f"evaluate.source must be generated or ground_truth, got {self.source!r}")
        if self.extractor not in ("tiny", "inception"):
            raise ConfigError(f"evaluate.extractor must be tiny or inception, got {self.extractor!r}")


@dataclass(slots=True)
class InferConfig:
    checkpoint: str = "runs/train/generator.pt"
    face_dir: str = ""
    audio: str = ""
    output_dir: str = "runs/infer"


_SECTIONS: dict[str, type] = {
    "window": WindowConfig,
    "data": DataConfig,
    "generator": GeneratorConfig,
    "expert": ExpertConfig,
    "trainer": TrainConfig,
    "lpips": LpipsConfig,
    "evaluate": EvalConfig,
    "infer": InferConfig,
}

# Derived from other sections; not settable under `generator:`.
_DERIVED_GENERATOR_KEYS = {"n_align_modules", "T", "image_size", "mel_bins", "mel_steps"}


@dataclass(slots=True)
class RunConfig:
    workspace: Path = field(default_factory=Path.cwd)
    window: WindowConfig = field(default_factory=WindowConfig)
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    lpips: LpipsConfig = field(default_factory=LpipsConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def resolve(self, path: str | Path) -> Path:
        """Resolve a config path against the workspace root."""
        p = Path(path)
        return p if p.is_absolute() else (self.workspace / p)

    def generator_config(self) -> GeneratorConfig:
        return replace(
            self.generator,
            n_align_modules=self.trainer.n_align_modules,
            T=self.window.T,
            image_size=self.window.image_size,
            mel_bins=self.window.mel_bins,
            mel_steps=self.window.mel_steps_per_window,
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"workspace": str(self.workspace)}
        for name in _SECTIONS:
            section = asdict(getattr(self, name))
            if name == "generator":
                section = {k: v for k, v in section.items() if k not in _DERIVED_GENERATOR_KEYS}
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dump_snapshot(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / SNAPSHOT_NAME
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")
        return path


# ---------- loading ----------

def _build_section(name: str, values: Any) -> Any:
    cls = _SECTIONS[name]
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if name == "generator":
        unknown |= set(values) & _DERIVED_GENERATOR_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"invalid section '{name}': {exc}") from exc


def apply_override(tree: dict[str, Any], assignment: str) -> None:
    """Apply one `a.b=value` override in place; the value is parsed as a YAML scalar."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"empty override key in {assignment!r}")
    node = tree
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot override inside non-mapping key '{key}'")
        node = child
    node[keys[-1]] = yaml.safe_load(raw) if raw.strip() else None


def build_run_config(tree: dict[str, Any], workspace: Optional[Path] = None) -> RunConfig:
    tree = dict(tree)
    ws = workspace or Path(tree.pop("workspace", None) or Path.cwd())
    tree.pop("workspace", None)
    unknown = set(tree) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {name: _build_section(name, tree.get(name)) for name in _SECTIONS}
    return RunConfig(workspace=Path(ws).resolve(), **sections)


def load_run_config(
    path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    workspace: Optional[Path] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """
    Parse the YAML run config, apply overrides, and validate every section.

    Raises:
        ConfigError on unreadable files, unknown keys or invalid values.
    """
    tree: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {path}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config file must contain a mapping: {path}")
        tree = loaded or {}

    for assignment in overrides:
        apply_override(tree, assignment)

    if seed is not None:
        for section in ("trainer", "expert", "data"):
            tree.setdefault(section, {})["seed"] = seed

    return build_run_config(tree, workspace=workspace)
