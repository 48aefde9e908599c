"""
command-line interface.

Commands:
  synth-data    : write the synthetic toy corpus to data.root
  preprocess    : compute / refresh the mel cache of every video under data.root
  train-expert  : pretrain the sync expert, save it to expert.checkpoint
  train         : train the generator (trainer.output_dir)
  infer         : lip-sync infer.face_dir to infer.audio, frames into infer.output_dir
  evaluate      : LSE-C / LSE-D / FID report into evaluate.output_dir

Every command takes --config <yaml>, repeatable --set section.key=value,
--workspace <dir> and --seed <int>, and writes the effective config snapshot
into its output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable

import yaml

from src.lipsync import logger
from src.lipsync.config import RunConfig, load_run_config
from src.lipsync.datapipe import make_synthetic_clip, preprocess_dataset, read_audio, read_frames, write_video_dir
from src.lipsync.exceptions import (
    CheckpointError,
    ConfigError,
    InputError,
    LipsyncError,
    MetricError,
    TrainingError,
)
from src.lipsync.logger import get_logger
from src.lipsync.trainer import evaluate, infer, train_expert_run, train_generator

log = get_logger(__name__)

# Most specific first.
EXIT_CODES: list[tuple[type[Exception], int]] = [
    (InputError, 1),
    (ConfigError, 3),
    (CheckpointError, 4),
    (TrainingError, 5),
    (MetricError, 6),
    (LipsyncError, 1),
]


# ---------- commands ----------

def _output_dir(run: RunConfig, command: str) -> Path:
    if command in ("synth-data", "preprocess"):
        return run.resolve(run.data.root)
    if command == "train-expert":
        return run.resolve(run.expert.checkpoint).parent
    if command == "train":
        return run.resolve(run.trainer.output_dir)
    if command == "infer":
        return run.resolve(run.infer.output_dir)
    return run.resolve(run.evaluate.output_dir)


def _synth_data(run: RunConfig) -> str:
    root = run.resolve(run.data.root)
    for v in range(run.data.n_videos):
        clip = make_synthetic_clip(v, run.data.seed, run.window, run.data.n_frames)
        write_video_dir(clip, root, run.window)
    return f"wrote {run.data.n_videos} synthetic videos to '{root}'"


def _preprocess(run: RunConfig) -> str:
    root = run.resolve(run.data.root)
    n = preprocess_dataset(root, run.window)
    return f"cached mel spectrograms for {n} videos under '{root}'"


def _train_expert(run: RunConfig) -> str:
    result = train_expert_run(run)
    return f"sync expert saved to '{run.resolve(run.expert.checkpoint)}' (holdout accuracy {result.accuracy:.3f})"


def _train(run: RunConfig) -> str:
    result = train_generator(run)
    last = result.curve[-1]["total"] if result.curve else float("nan")
    return f"generator saved to '{result.checkpoint}' after {result.steps} steps (total={last:.4f})"


def _infer(run: RunConfig) -> str:
    if not run.infer.face_dir or not run.infer.audio:
        raise InputError("infer.face_dir and infer.audio must both be set")
    frames = read_frames(run.resolve(run.infer.face_dir), run.window)
    waveform = read_audio(run.resolve(run.infer.audio), run.window)
    frames_dir = run.resolve(run.infer.output_dir) / "frames"
    out = infer(run, frames, waveform, output_dir=frames_dir)
    return f"wrote {len(out)} frames to '{frames_dir}'"


def _evaluate(run: RunConfig) -> str:
    report = evaluate(run)
    return f"lse_c={report['lse_c']:.4f} lse_d={report['lse_d']:.4f} fid={report['fid']:.4f}"


COMMANDS: dict[str, tuple[Callable[[RunConfig], str], str]] = {
    "synth-data": (_synth_data, "Write the synthetic toy corpus (data.*)."),
    "preprocess": (_preprocess, "Compute the mel cache for every video under data.root."),
    "train-expert": (_train_expert, "Pretrain the lip-sync expert."),
    "train": (_train, "Train the generator against the frozen expert."),
    "infer": (_infer, "Generate lip-synced frames for a face video and an audio file."),
    "evaluate": (_evaluate, "Compute LSE-C, LSE-D and FID and write a report."),
}


# ---------- entry point ----------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML run config.")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. trainer.alpha=0.03 (repeatable).")
    common.add_argument("--workspace", type=Path, default=None, help="Root for relative paths (default: cwd).")
    common.add_argument("--seed", type=int, default=None, help="Seed for data, expert and trainer.")

    parser = argparse.ArgumentParser(
        prog="lipsync",
        description="Audio-driven lip-sync generation: data, training, inference and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def _exit_code(exc: Exception) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def run(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage / help
        return int(exc.code) if isinstance(exc.code, int) else 2

    try:
        run_cfg = load_run_config(args.config, args.overrides, args.workspace, args.seed)
        log_path = logger.configure(run_cfg.workspace / "logs")
        log.info("command=%s log=%s", args.command, log_path)
        log.info("effective config:\n%s", yaml.safe_dump(run_cfg.to_dict(), sort_keys=True).rstrip())

        run_cfg.dump_snapshot(_output_dir(run_cfg, args.command))
        handler, _ = COMMANDS[args.command]
        message = handler(run_cfg)
        print(f"OK: {message}")
        return 0

    except LipsyncError as exc:
        log.error("%s failed: %s", args.command, exc)
        message = str(exc).replace('"', "'")
        print(f'error={type(exc).__name__} message="{message}"', file=sys.stderr)
        return _exit_code(exc)
    except Exception as exc:
        log.exception("unexpected error in '%s'", args.command)
        print(f'error={type(exc).__name__} message="unexpected error, see the run log"', file=sys.stderr)
        return 1


main = run


if __name__ == "__main__":
    raise SystemExit(run())
