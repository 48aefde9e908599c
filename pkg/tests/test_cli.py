import contextlib
import io
import unittest

import yaml

from src.lipsync import cli, storage
from support import SandboxedTestCase

SMALL_RUN = {
    "data": {"root": "data/toy", "n_videos": 3, "n_frames": 40},
    "generator": {"stem_width": 8, "widths": [8, 8, 16, 16]},
    "expert": {"embed_dim": 32, "width": 4, "epochs": 1, "batch_size": 8, "n_pairs": 48},
    "trainer": {"batch_size": 2, "max_steps": 2, "eval_every": 2, "n_align_modules": 1},
    "evaluate": {"max_offset": 3},
}


class CliTestCase(SandboxedTestCase):
    def setUp(self) -> None:
        super().setUp()
        self.config_path = self.base / "small.yaml"
        self.config_path.write_text(yaml.safe_dump(SMALL_RUN), encoding="utf-8")

    def _run(self, *args: str) -> tuple[int, str, str]:
        out, err = io.StringIO(), io.StringIO()
        argv = [*args, "--config", str(self.config_path), "--workspace", str(self.base)]
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = cli.run(argv)
        return code, out.getvalue(), err.getvalue()


class CliPipelineTests(CliTestCase):
    def test_full_pipeline(self):
        code, out, _ = self._run("synth-data")
        self.assertEqual(code, 0, out)
        self.assertTrue(out.startswith("OK: wrote 3 synthetic videos"))
        self.assertEqual(len(list((self.base / "data" / "toy").glob("toy*"))), 3)

        code, out, _ = self._run("preprocess")
        self.assertEqual(code, 0)
        self.assertTrue((self.base / "data" / "toy" / "toy0000" / "mel.f32").exists())

        code, out, err = self._run("train-expert")
        self.assertEqual(code, 0, err)
        self.assertTrue((self.base / "runs" / "expert" / "expert.pt").is_file())

        code, out, err = self._run("train")
        self.assertEqual(code, 0, err)
        self.assertTrue((self.base / "runs" / "train" / "generator.pt").is_file())
        self.assertTrue((self.base / "runs" / "train" / "config.snapshot.yaml").is_file())

        code, out, err = self._run("evaluate")
        self.assertEqual(code, 0, err)
        self.assertIn("lse_c=", out)
        report = storage.read_report(self.base / "runs" / "evaluate" / "report.txt")
        self.assertEqual(report["n_videos"], 3)

        code, out, err = self._run("infer", "--set", "infer.face_dir=data/toy/toy0001/frames",
                                   "--set", "infer.audio=data/toy/toy0000/audio.wav")
        self.assertEqual(code, 0, err)
        self.assertEqual(len(list((self.base / "runs" / "infer" / "frames").glob("*.png"))), 40 - 5 + 1)
        self.assertTrue((self.base / "logs" / "lipsync.log").is_file())


class CliSnapshotTests(CliTestCase):
    def test_rerun_from_the_snapshot_alone(self):
        code, _, err = self._run("synth-data", "--set", "trainer.n_align_modules=3", "--seed", "7")
        self.assertEqual(code, 0, err)
        snapshot = self.base / "data" / "toy" / "config.snapshot.yaml"
        first = snapshot.read_text(encoding="utf-8")
        audio = (self.base / "data" / "toy" / "toy0002" / "audio.wav").read_bytes()

        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()) as err:
            code = cli.run(["synth-data", "--config", str(snapshot)])
        self.assertEqual(code, 0, err.getvalue())
        self.assertEqual(snapshot.read_text(encoding="utf-8"), first)
        self.assertEqual((self.base / "data" / "toy" / "toy0002" / "audio.wav").read_bytes(), audio)
        self.assertEqual(yaml.safe_load(first)["trainer"]["n_align_modules"], 3)


class CliErrorTests(CliTestCase):
    def test_unknown_command_is_a_usage_error(self):
        with contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(cli.run(["dance"]), 2)

    def test_config_errors_exit_3(self):
        code, _, err = self._run("synth-data", "--set", "trainer.alpha=0.9", "--set", "trainer.beta=0.5")
        self.assertEqual(code, 3)
        self.assertTrue(err.startswith("error=ConfigError message="))

    def test_training_without_expert_exits_3(self):
        self._run("synth-data")
        code, _, err = self._run("train")
        self.assertEqual(code, 3)
        self.assertIn("train-expert", err)

    def test_missing_generator_checkpoint_exits_4(self):
        self._run("synth-data")
        self._run("train-expert")
        code, _, err = self._run("evaluate")
        self.assertEqual(code, 4)
        self.assertTrue(err.startswith("error=CheckpointError"))

    def test_infer_without_inputs_exits_1(self):
        code, _, err = self._run("infer")
        self.assertEqual(code, 1)
        self.assertIn("infer.face_dir", err)

    def test_missing_dataset_exits_1(self):
        code, _, err = self._run("preprocess")
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("error=DatasetError"))


if __name__ == "__main__":
    unittest.main(verbosity=2)
