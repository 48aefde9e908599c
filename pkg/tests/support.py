"""
Shared test helpers: temp-dir sandboxing of config paths, small configs, the
slow-test switch.
"""

import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import torch

from src.lipsync import config
from src.lipsync.config import ExpertConfig, GeneratorConfig, RunConfig, WindowConfig

SLOW = os.environ.get("LIPSYNC_SLOW_TESTS") == "1"
slow = unittest.skipUnless(SLOW, "set LIPSYNC_SLOW_TESTS=1 to run desk-scale training experiments")


class SandboxedTestCase(unittest.TestCase):
    """Creates a temp workspace and repoints config paths into it."""

    def setUp(self) -> None:
        self.tmpdir = tempfile.TemporaryDirectory()
        self.base = Path(self.tmpdir.name)

        self._saved = (config.LOGS_DIR, config.RUNS_DIR, config.DATA_DIR)
        config.LOGS_DIR = self.base / "logs"
        config.RUNS_DIR = self.base / "runs"
        config.DATA_DIR = self.base / "data"
        for d in (config.LOGS_DIR, config.RUNS_DIR, config.DATA_DIR):
            d.mkdir(parents=True, exist_ok=True)

    def tearDown(self) -> None:
        config.LOGS_DIR, config.RUNS_DIR, config.DATA_DIR = self._saved
        self.tmpdir.cleanup()


def small_generator_config(n_align: int = 2, divisor: int = 4) -> GeneratorConfig:
    """Full geometry (96 px, 80×16 mel), widths divided so CPU tests stay quick."""
    return GeneratorConfig(n_align_modules=n_align).scaled(divisor)


def small_expert_config(**overrides) -> ExpertConfig:
    values = dict(embed_dim=32, width=4, epochs=2, batch_size=8, n_pairs=64)
    values.update(overrides)
    return ExpertConfig(**values)


def small_run_config(workspace: Path, **sections) -> RunConfig:
    """A RunConfig sized for unit tests (tiny widths, few steps)."""
    run = RunConfig(workspace=workspace)
    run.generator = replace(run.generator, stem_width=8, widths=(8, 8, 16, 16))
    run.expert = small_expert_config(checkpoint="runs/expert/expert.pt")
    run.trainer = replace(run.trainer, batch_size=2, max_steps=3, eval_every=2, n_align_modules=2)
    run.data = replace(run.data, n_videos=3, n_frames=40)
    run.evaluate = replace(run.evaluate, max_offset=3)
    for name, value in sections.items():
        setattr(run, name, value)
    return run


def untrained_expert(window: WindowConfig = WindowConfig(), **overrides):
    """A small randomly initialised expert flagged as trained and frozen (for loss plumbing tests)."""
    from src.lipsync.syncexpert import SyncExpert, freeze

    expert = SyncExpert(small_expert_config(**overrides), window.image_size, window.mel_bins, window.mel_steps_per_window)
    return freeze(expert.mark_trained())


def seeded(seed: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(seed)
