import unittest

import numpy as np
import soundfile as sf
import torch

from src.lipsync.config import WindowConfig
from src.lipsync.datapipe import (
    WindowDataset,
    crop_mel,
    delay_audio,
    extract_windows,
    frame_mel_chunks,
    load_dataset,
    load_video_dir,
    make_synthetic_clip,
    make_synthetic_dataset,
    mask_lower_half,
    measure_mouth_heights,
    mel_chunk_start,
    mel_filter_centers,
    mel_spectrogram,
    mouth_audio_correlation,
    read_audio,
    shuffle_audio,
    write_video_dir,
)
from src.lipsync.exceptions import DatasetError, InputError
from support import SandboxedTestCase

CFG = WindowConfig()


class MelSpectrogramTests(unittest.TestCase):
    def test_silence_sits_on_the_log_floor(self):
        mel = mel_spectrogram(np.zeros(16_000, dtype=np.float32), CFG)
        self.assertEqual(mel.shape, (80, 81))
        np.testing.assert_allclose(mel, np.log10(1e-5))

    def test_one_second_has_81_steps(self):
        rng = np.random.default_rng(0)
        mel = mel_spectrogram(rng.standard_normal(16_000).astype(np.float32) * 0.1, CFG)
        self.assertEqual(mel.shape[1], 16_000 // 200 + 1)
        self.assertTrue(np.all(mel >= np.log10(1e-5)))

    def test_tone_peaks_in_the_nearest_filter(self):
        t = np.arange(16_000) / 16_000
        mel = mel_spectrogram((0.5 * np.sin(2 * np.pi * 440.0 * t)).astype(np.float32), CFG)
        expected = int(np.argmin(np.abs(mel_filter_centers(CFG) - 440.0)))
        self.assertEqual(int(mel.mean(axis=1).argmax()), expected)

    def test_bad_audio_raises(self):
        with self.assertRaises(InputError):
            mel_spectrogram(np.zeros(0, dtype=np.float32), CFG)
        with self.assertRaises(InputError):
            mel_spectrogram(np.zeros(16_000, dtype=np.float32), CFG, sample_rate=22_050)
        with self.assertRaises(InputError):
            mel_spectrogram(np.zeros((2, 16_000), dtype=np.float32), CFG)
        with self.assertRaises(InputError):
            mel_spectrogram(np.zeros(100, dtype=np.float32), CFG)


class MaskTests(unittest.TestCase):
    def test_all_ones_frame(self):
        out = mask_lower_half(np.ones((3, 96, 96), dtype=np.float32))
        self.assertTrue(np.all(out[:, :48] == 1.0))
        self.assertTrue(np.all(out[:, 48:] == 0.0))

    def test_idempotent_and_upper_half_untouched(self):
        x = np.random.default_rng(1).random((2, 3, 96, 96)).astype(np.float32)
        once = mask_lower_half(x)
        np.testing.assert_array_equal(mask_lower_half(once), once)
        np.testing.assert_array_equal(once[..., :48, :], x[..., :48, :])
        self.assertTrue(np.all(x[..., 48:, :] > 0), "input must not be modified")

    def test_torch_tensors(self):
        x = torch.rand(4, 3, 96, 96)
        out = mask_lower_half(x)
        self.assertTrue(torch.equal(out[..., :48, :], x[..., :48, :]))
        self.assertEqual(float(out[..., 48:, :].abs().sum()), 0.0)


def _frames(n: int) -> np.ndarray:
    return np.random.default_rng(n).random((n, 3, 96, 96)).astype(np.float32)


def _mel_for(n_frames: int) -> np.ndarray:
    samples = int(n_frames / CFG.fps * CFG.sample_rate)
    wav = np.random.default_rng(7).standard_normal(samples).astype(np.float32) * 0.1
    return mel_spectrogram(wav, CFG)


class WindowTests(unittest.TestCase):
    def test_ten_frames_force_the_only_disjoint_reference(self):
        windows = extract_windows(_frames(10), _mel_for(10), CFG, seed=0)
        by_start = {w.target_start: w for w in windows}
        self.assertIn(0, by_start)
        self.assertEqual(by_start[0].reference_start, 5)
        self.assertEqual(by_start[5].reference_start, 0)
        self.assertEqual(sorted(by_start), [0, 5])

    def test_same_seed_same_windows(self):
        frames, mel = _frames(30), _mel_for(30)
        a = extract_windows(frames, mel, CFG, seed=3)
        b = extract_windows(frames, mel, CFG, seed=3)
        self.assertEqual([w.reference_start for w in a], [w.reference_start for w in b])
        for wa, wb in zip(a, b):
            np.testing.assert_array_equal(wa.reference, wb.reference)
            np.testing.assert_array_equal(wa.mel.values, wb.mel.values)

    def test_long_video_invariants(self):
        frames, mel = _frames(100), _mel_for(100)
        windows = extract_windows(frames, mel, CFG, seed=0)
        self.assertGreater(len(windows), 80)
        for w in windows:
            self.assertGreaterEqual(abs(w.reference_start - w.target_start), CFG.T)
            self.assertEqual(w.mel.start_frame, w.target_start)
            self.assertEqual(w.mel.values.shape, (1, 80, 16))
            self.assertEqual(w.frame_mels.shape, (5, 1, 80, 16))
            np.testing.assert_array_equal(w.target, frames[w.target_start:w.target_start + 5])
            np.testing.assert_array_equal(w.reference, frames[w.reference_start:w.reference_start + 5])

    def test_parallel_extraction_matches_serial(self):
        frames, mel = _frames(40), _mel_for(40)
        serial = extract_windows(frames, mel, CFG, seed=5)
        parallel = extract_windows(frames, mel, CFG, seed=5, workers=4)
        self.assertEqual(
            [(w.target_start, w.reference_start) for w in serial],
            [(w.target_start, w.reference_start) for w in parallel],
        )

    def test_short_video_is_skipped_with_warning(self):
        with self.assertLogs("src.lipsync.datapipe", level="WARNING"):
            self.assertEqual(extract_windows(_frames(9), _mel_for(9), CFG, seed=0, video_id="short"), [])

    def test_mel_chunk_covers_the_window_span(self):
        mel = _mel_for(40)
        for t in (0, 1, 7, 20):
            chunk = crop_mel(mel, t, CFG)
            start = mel_chunk_start(t, CFG)
            self.assertLess(abs(start * CFG.mel_hop - t / CFG.fps), CFG.mel_hop)
            self.assertAlmostEqual(chunk.values.shape[-1] * CFG.mel_hop, CFG.T / CFG.fps)
            np.testing.assert_array_equal(chunk.values[0], mel[:, start:start + 16])
        self.assertIsNone(crop_mel(mel, 39, CFG))

    def test_frame_chunks_are_centred_and_clamped(self):
        mel = _mel_for(40)
        chunks = frame_mel_chunks(mel, 10, CFG)
        np.testing.assert_array_equal(chunks[2, 0], mel[:, mel_chunk_start(10, CFG):mel_chunk_start(10, CFG) + 16])
        first = frame_mel_chunks(mel, 0, CFG)
        np.testing.assert_array_equal(first[0, 0], mel[:, :16])

    def test_window_dataset_tensors(self):
        windows = extract_windows(_frames(20), _mel_for(20), CFG, seed=0)
        item = WindowDataset(windows)[0]
        self.assertEqual(tuple(item["target"].shape), (5, 3, 96, 96))
        self.assertEqual(tuple(item["mel"].shape), (1, 80, 16))
        self.assertEqual(tuple(item["frame_mels"].shape), (5, 1, 80, 16))
        with self.assertRaises(DatasetError):
            WindowDataset([])


class SyntheticDatasetTests(unittest.TestCase):
    def test_same_seed_is_byte_identical(self):
        a = make_synthetic_dataset(seed=4, n_videos=2, cfg=CFG, n_frames=20)
        b = make_synthetic_dataset(seed=4, n_videos=2, cfg=CFG, n_frames=20)
        for ca, cb in zip(a.clips, b.clips):
            self.assertEqual(ca.frames.tobytes(), cb.frames.tobytes())
            self.assertEqual(ca.waveform.tobytes(), cb.waveform.tobytes())
            self.assertEqual(ca.mel.tobytes(), cb.mel.tobytes())
        self.assertEqual(len(a.windows), len(b.windows))

    def test_mouth_height_is_monotone_in_frequency(self):
        clip = make_synthetic_clip(0, seed=1, cfg=CFG, n_frames=60)
        order = np.argsort(clip.frequencies)
        self.assertTrue(np.all(np.diff(clip.mouth_heights[order]) >= 0))
        np.testing.assert_array_equal(measure_mouth_heights(clip.frames), clip.mouth_heights)

    def test_frames_in_unit_range_and_audio_length(self):
        clip = make_synthetic_clip(2, seed=0, cfg=CFG, n_frames=25)
        self.assertTrue(np.all((clip.frames >= 0) & (clip.frames <= 1)))
        self.assertEqual(clip.waveform.shape[0], 25 * 640)
        self.assertEqual(clip.mel.shape, (80, 25 * 640 // 200 + 1))

    def test_true_pairs_correlate_better_than_shuffled(self):
        clips = make_synthetic_dataset(seed=0, n_videos=5, cfg=CFG, n_frames=30).clips
        true_r = mouth_audio_correlation(clips, CFG)
        shuffled_r = mouth_audio_correlation(shuffle_audio(clips, seed=0), CFG)
        self.assertGreater(true_r, 0.5)
        self.assertGreater(true_r, shuffled_r)

    def test_shuffle_audio_never_keeps_own_audio(self):
        clips = make_synthetic_dataset(seed=0, n_videos=3, cfg=CFG, n_frames=12).clips
        for own, mixed in zip(clips, shuffle_audio(clips, seed=9)):
            self.assertFalse(np.array_equal(own.waveform, mixed.waveform))
        with self.assertRaises(InputError):
            shuffle_audio(clips[:1], seed=0)

    def test_delay_audio_shifts_by_whole_frames(self):
        wav = np.arange(640 * 4, dtype=np.float32)
        delayed = delay_audio(wav, 2, CFG)
        self.assertEqual(delayed.shape, wav.shape)
        np.testing.assert_array_equal(delayed[:1280], 0)
        np.testing.assert_array_equal(delayed[1280:], wav[:1280])


class DiskLayoutTests(SandboxedTestCase):
    def test_round_trip_and_mel_cache(self):
        clip = make_synthetic_clip(0, seed=0, cfg=CFG, n_frames=12)
        video_dir = write_video_dir(clip, self.base / "data", CFG)
        self.assertEqual(len(list((video_dir / "frames").glob("*.png"))), 12)

        loaded = load_video_dir(video_dir, CFG)
        np.testing.assert_allclose(loaded.frames, clip.frames, atol=0.5 / 255 + 1e-6)
        self.assertTrue((video_dir / "mel.f32").exists())
        self.assertIn(f"config_hash={CFG.hash()}", (video_dir / "mel.meta").read_text(encoding="utf-8"))

        cached = load_video_dir(video_dir, CFG)
        np.testing.assert_array_equal(cached.mel, loaded.mel)

        other = WindowConfig(mel_fmax=7000.0)
        refreshed = load_video_dir(video_dir, other)
        self.assertFalse(np.array_equal(refreshed.mel, loaded.mel))
        self.assertIn(f"config_hash={other.hash()}", (video_dir / "mel.meta").read_text(encoding="utf-8"))

    def test_missing_root_raises(self):
        with self.assertRaises(DatasetError):
            load_dataset(self.base / "nope", CFG)

    def test_wrong_sample_rate_raises(self):
        path = self.base / "a.wav"
        sf.write(str(path), np.zeros(8000, dtype=np.float32), 8000)
        with self.assertRaises(InputError):
            read_audio(path, CFG)


if __name__ == "__main__":
    unittest.main(verbosity=2)
