"""
on-disk formats: checkpoints, cached mel spectrograms, loss curves and metric reports.

- Checkpoints embed the model config, the data config hash and a format
  version; loading refuses anything produced under a different setup.
- Mel caches are raw little-endian float32 with a small text sidecar.
- Loss curves are line-delimited JSON, appended as training runs.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import torch

from src.lipsync import config
from src.lipsync.exceptions import CheckpointError, CheckpointMismatchError
from src.lipsync.logger import get_logger
from src.lipsync.models import LossReport

log = get_logger(__name__)

_MEL_DATA = "mel.f32"
_MEL_META = "mel.meta"
_REPORT_JSON_MARKER = "# json"


# ---------- checkpoints ----------

def save_checkpoint(
    path: Path,
    kind: str,
    model_config: dict[str, Any],
    state_dict: dict[str, torch.Tensor],
    data_config_hash: str,
    step: int = 0,
    optimizer_state: Optional[dict] = None,
    rng_state: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": config.CHECKPOINT_FORMAT,
        "kind": kind,
        "config": _plain(model_config),
        "data_config_hash": data_config_hash,
        "step": step,
        "state_dict": state_dict,
        "optimizer_state": optimizer_state,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    # write-then-rename so a crash never leaves a truncated checkpoint behind
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint: {path}") from exc
    log.info("saved %s checkpoint '%s' (step %d)", kind, path.name, step)
    return path


def load_checkpoint(
    path: Path,
    kind: str,
    expected_config: Optional[dict[str, Any]] = None,
    data_config_hash: Optional[str] = None,
) -> dict[str, Any]:
    """
    Read a checkpoint and verify it matches what the caller is about to run.

    Raises:
        CheckpointError if the file is missing or unreadable.
        CheckpointMismatchError on version, kind, config or data-hash mismatch.
    """
    if not path.exists() or not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint: {path}") from exc

    if not isinstance(payload, dict) or payload.get("format_version") != config.CHECKPOINT_FORMAT:
        found = payload.get("format_version") if isinstance(payload, dict) else None
        raise CheckpointMismatchError(
            f"unsupported checkpoint format {found!r} (expected {config.CHECKPOINT_FORMAT!r}): {path}"
        )
    if payload.get("kind") != kind:
        raise CheckpointMismatchError(f"expected a {kind} checkpoint, found {payload.get('kind')!r}: {path}")
    if expected_config is not None and payload["config"] != _plain(expected_config):
        raise CheckpointMismatchError(f"checkpoint config differs from the requested {kind} config: {path}")
    if data_config_hash is not None and payload.get("data_config_hash") != data_config_hash:
        raise CheckpointMismatchError(
            f"checkpoint data config hash {payload.get('data_config_hash')} != dataset hash {data_config_hash}"
        )
    return payload


def _plain(obj: Any) -> Any:
    """Normalise tuples to lists so configs compare equal after a round trip."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------- mel cache ----------

def save_mel_cache(video_dir: Path, mel: np.ndarray, cfg_hash: str) -> None:
    mel = np.ascontiguousarray(mel, dtype="<f4")
    (video_dir / _MEL_DATA).write_bytes(mel.tobytes())
    (video_dir / _MEL_META).write_text(
        f"shape={','.join(str(d) for d in mel.shape)}\nconfig_hash={cfg_hash}\n",
        encoding="utf-8",
    )


def load_mel_cache(video_dir: Path, cfg_hash: str) -> Optional[np.ndarray]:
    """Return the cached mel, or None when absent, corrupt, or computed under another config."""
    data_path, meta_path = video_dir / _MEL_DATA, video_dir / _MEL_META
    if not data_path.exists() or not meta_path.exists():
        return None
    try:
        meta = dict(
            line.split("=", 1)
            for line in meta_path.read_text(encoding="utf-8").splitlines()
            if "=" in line
        )
        if meta.get("config_hash") != cfg_hash:
            log.info("stale mel cache in '%s' (config changed), recomputing", video_dir.name)
            return None
        shape = tuple(int(d) for d in meta["shape"].split(","))
        return np.frombuffer(data_path.read_bytes(), dtype="<f4").reshape(shape).astype(np.float32)
    except (KeyError, ValueError) as exc:
        log.warning("ignoring unreadable mel cache in '%s': %s", video_dir.name, exc)
        return None


# ---------- loss curves ----------

class LossCurveWriter:
    """Appends one JSON record per training step."""

    def __init__(self, path: Path, append: bool = False) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        if not append:
            path.write_text("", encoding="utf-8")

    def write(self, step: int, report: LossReport) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(report.to_record(step)) + "\n")


def read_loss_curve(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def truncate_loss_curve(path: Path, last_step: int) -> None:
    """Drop records after `last_step` (used when resuming from an older checkpoint)."""
    if not path.exists():
        return
    kept = [r for r in read_loss_curve(path) if r["step"] <= last_step]
    path.write_text("".join(json.dumps(r) + "\n" for r in kept), encoding="utf-8")


# ---------- metric reports ----------

def write_report(path: Path, report: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: Iterable[str] = (f"{k}={report[k]}" for k in sorted(report))
    text = "\n".join(lines) + f"\n{_REPORT_JSON_MARKER}\n" + json.dumps(report, sort_keys=True) + "\n"
    path.write_text(text, encoding="utf-8")
    log.info("wrote metrics report '%s'", path)
    return path


def read_report(path: Path) -> dict[str, Any]:
    text = path.read_text(encoding="utf-8")
    _, _, block = text.partition(_REPORT_JSON_MARKER + "\n")
    return json.loads(block)
