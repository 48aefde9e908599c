import unittest

import numpy as np
import torch

from src.lipsync import storage
from src.lipsync.exceptions import CheckpointError, CheckpointMismatchError
from src.lipsync.models import LossReport, LossWeights
from support import SandboxedTestCase


def _report(total: float) -> LossReport:
    return LossReport(recon=total, sync=0.0, lpips=0.0, total=total, weights=LossWeights())


class CheckpointFormatTests(SandboxedTestCase):
    def test_tuples_compare_equal_after_a_round_trip(self):
        path = storage.save_checkpoint(self.base / "m.pt", "generator", {"widths": (1, 2)}, {}, "h")
        payload = storage.load_checkpoint(path, "generator", expected_config={"widths": (1, 2)}, data_config_hash="h")
        self.assertEqual(payload["config"], {"widths": [1, 2]})
        self.assertEqual(payload["extra"], {})

    def test_wrong_kind_version_or_garbage(self):
        path = storage.save_checkpoint(self.base / "m.pt", "expert", {}, {}, "h")
        with self.assertRaises(CheckpointMismatchError):
            storage.load_checkpoint(path, "generator")

        torch.save({"format_version": "something-else", "kind": "expert"}, self.base / "old.pt")
        with self.assertRaises(CheckpointMismatchError):
            storage.load_checkpoint(self.base / "old.pt", "expert")

        (self.base / "junk.pt").write_bytes(b"not a checkpoint")
        with self.assertRaises(CheckpointError):
            storage.load_checkpoint(self.base / "junk.pt", "expert")


class MelCacheTests(SandboxedTestCase):
    def test_round_trip_and_staleness(self):
        mel = np.random.default_rng(0).standard_normal((80, 33)).astype(np.float32)
        storage.save_mel_cache(self.base, mel, "aaa")
        np.testing.assert_array_equal(storage.load_mel_cache(self.base, "aaa"), mel)
        self.assertIsNone(storage.load_mel_cache(self.base, "bbb"))

    def test_corrupt_cache_is_ignored(self):
        storage.save_mel_cache(self.base, np.zeros((4, 4), dtype=np.float32), "aaa")
        (self.base / "mel.f32").write_bytes(b"\x00" * 7)
        with self.assertLogs("src.lipsync.storage", level="WARNING"):
            self.assertIsNone(storage.load_mel_cache(self.base, "aaa"))


class LossCurveTests(SandboxedTestCase):
    def test_write_append_and_truncate(self):
        path = self.base / "curve" / "loss_curve.jsonl"
        writer = storage.LossCurveWriter(path)
        for step in range(4):
            writer.write(step, _report(float(step)))
        self.assertEqual([r["step"] for r in storage.read_loss_curve(path)], [0, 1, 2, 3])

        storage.truncate_loss_curve(path, 1)
        storage.LossCurveWriter(path, append=True).write(2, _report(9.0))
        records = storage.read_loss_curve(path)
        self.assertEqual([r["step"] for r in records], [0, 1, 2])
        self.assertEqual(records[-1]["total"], 9.0)

        storage.LossCurveWriter(path)
        self.assertEqual(storage.read_loss_curve(path), [])


class ReportTests(SandboxedTestCase):
    def test_report_is_readable_both_ways(self):
        report = {"lse_c": 1.5, "lse_d": 0.25, "fid": 3.0, "source": "generated"}
        path = storage.write_report(self.base / "eval" / "report.txt", report)
        text = path.read_text(encoding="utf-8")
        self.assertIn("lse_c=1.5\n", text)
        self.assertTrue(text.startswith("fid=3.0\n"))
        self.assertEqual(storage.read_report(path), report)


if __name__ == "__main__":
    unittest.main(verbosity=2)
