import json

import numpy as np
import pytest
import torch

from omnidesk.condition_encoders import JOINT_NAMES, SkeletonSequence, Vocabulary
from omnidesk.config import CodecConfig, EvalSettings, SynthSettings
from omnidesk.errors import MaskEmptyError, UndefinedMetricError
from omnidesk.latent_codec import PixelVideo
from omnidesk.omnidit import OmniDiT
from omnidesk.synth_eval import (
    FACE_COLOR,
    MAX_AMPLITUDE,
    SpriteSpec,
    audio_envelope,
    clip_rng,
    evaluate_model,
    pose_deviation,
    psnr,
    sample_flags,
    sync_correlation,
    synth_clip,
    write_dataset,
)
from omnidesk.training import read_manifest


def clip(seed=0, duration=25, silent=False, size=16):
    return synth_clip(f"c{seed}", duration, np.random.default_rng(seed), SynthSettings(size=size), silent=silent)


class TestSprites:
    def test_same_rng_same_clip(self):
        a, b = clip(4), clip(4)
        assert np.array_equal(a.video.frames, b.video.frames)
        assert np.array_equal(a.wave, b.wave)
        assert a.record == b.record

    def test_waveform_stays_in_range(self):
        for seed in range(5):
            assert np.abs(clip(seed).wave).max() <= MAX_AMPLITUDE + 1e-6

    def test_envelope_never_clips(self):
        c = clip(2)
        envelope = audio_envelope(c.wave, c.video.num_frames)
        assert envelope.min() >= 0.0 and envelope.max() <= 1.0

    def test_silent_clip_keeps_the_mouth_closed(self):
        c = clip(1, silent=True)
        rows, cols = SpriteSpec().mouth_region
        np.testing.assert_allclose(c.video.frames[:, rows, cols], np.broadcast_to(FACE_COLOR, (25, 1, 4, 3)), atol=1e-6)

    def test_mouth_sits_inside_the_face(self):
        spec = SpriteSpec()
        rows, cols = spec.mouth_region
        cx, cy = spec.face_center
        for r in range(rows.start, rows.stop):
            for c in range(cols.start, cols.stop):
                corner = max(np.hypot(x - cx, y - cy) for x in (c, c + 1) for y in (r, r + 1))
                assert corner < spec.face_radius

    def test_caption_names_palette_and_action(self):
        words = clip(3).record.caption.split()
        assert words[1] == "person"


class TestSyncMetric:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_rendered_clip_is_perfectly_synced(self, seed):
        c = clip(seed)
        assert sync_correlation(c.video, c.wave) == pytest.approx(1.0, abs=1e-6)

    def test_amplitude_scale_does_not_matter(self):
        c = clip(5)
        assert sync_correlation(c.video, 0.5 * c.wave) == pytest.approx(sync_correlation(c.video, c.wave), abs=1e-9)

    def test_constant_video_is_undefined(self):
        c = clip(0)
        still = PixelVideo(np.repeat(c.video.frames[:1], c.video.num_frames, axis=0))
        with pytest.raises(UndefinedMetricError):
            sync_correlation(still, c.wave)

    def test_too_short_is_undefined(self):
        c = clip(0, duration=2)
        with pytest.raises(UndefinedMetricError):
            sync_correlation(c.video, c.wave)

    @pytest.mark.slow
    def test_shuffled_frames_lose_sync(self):
        values = []
        for seed in range(100):
            c = clip(seed)
            order = np.random.default_rng(1000 + seed).permutation(c.video.num_frames)
            try:
                values.append(abs(sync_correlation(PixelVideo(c.video.frames[order]), c.wave)))
            except UndefinedMetricError:
                continue
        assert np.median(values) < 0.2


class TestPoseMetric:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_hands_are_recovered(self, seed):
        c = clip(seed)
        assert pose_deviation(c.video, c.skeleton) < 0.5

    def test_shifted_skeleton_is_measured_in_pixels(self):
        c = clip(6)
        shifted = c.skeleton.keypoints.copy()
        shifted[:, [JOINT_NAMES.index("left_wrist"), JOINT_NAMES.index("right_wrist")], 0] += 2.0 / 16
        error = pose_deviation(c.video, SkeletonSequence(shifted, c.skeleton.visible))
        assert error == pytest.approx(2.0, abs=0.5)

    def test_blank_video_has_no_hands(self):
        c = clip(0)
        with pytest.raises(MaskEmptyError):
            pose_deviation(PixelVideo(np.zeros_like(c.video.frames)), c.skeleton)

    def test_psnr(self):
        c = clip(0)
        assert psnr(c.video, c.video) == float("inf")
        noisy = PixelVideo(np.clip(c.video.frames + 0.1, 0.0, 1.0))
        assert 15.0 < psnr(noisy, c.video) < 25.0


class TestDataset:
    def test_flag_rates_follow_settings(self):
        settings = SynthSettings(lipsync_rate=0.3, pose_visible_rate=0.5)
        rng = np.random.default_rng(0)
        flags = [sample_flags(rng, settings) for _ in range(10_000)]
        assert np.mean([f.lipsync_ok for f in flags]) == pytest.approx(0.3, abs=0.02)
        assert np.mean([f.pose_visible for f in flags]) == pytest.approx(0.5, abs=0.02)

    def test_write_dataset(self, tmp_path):
        settings = SynthSettings(num_clips=4, duration=6, size=8)
        summary = write_dataset(tmp_path, settings, heldout=2, seed=1)
        train = read_manifest(tmp_path / "manifest.jsonl")
        held = read_manifest(tmp_path / "heldout.jsonl")
        assert summary["clips"] == 4
        assert not {r.id for r in train} & {r.id for r in held}
        assert (tmp_path / train[0].frames_path).exists()
        assert len(Vocabulary.load(tmp_path / "vocab.json")) > 3

    def test_clip_rng_separates_splits(self):
        assert clip_rng(0, 0, 1).random() != clip_rng(0, 1, 1).random()


class TestEvaluate:
    def test_one_row_per_clip_and_mode(self, tmp_path, tiny_model_cfg):
        clips = [clip(seed, duration=9, size=8) for seed in range(2)]
        vocab = Vocabulary.build([c.record.caption for c in clips])
        model = OmniDiT(tiny_model_cfg, CodecConfig(sp=2, gt=4))
        settings = EvalSettings(modes=["audio", "pose", "audio+pose"], steps=1, segment_length=9)
        report = evaluate_model(model, clips, vocab, settings, out_dir=tmp_path, seed=0)
        assert report.rows == 6
        assert report.failures == 0
        lines = (tmp_path / "eval.csv").read_text().splitlines()
        assert lines[0].startswith("# ")
        assert len(lines) == 2 + 6
        assert json.loads((tmp_path / "report.json").read_text())["rows"] == 6
        for metric in ("sync_corr", "pose_err", "recon_psnr"):
            assert (tmp_path / f"{metric}.dat").exists()

    def test_evaluation_is_reproducible(self, tiny_model_cfg):
        clips = [clip(7, duration=9, size=8)]
        vocab = Vocabulary.build([clips[0].record.caption])
        torch.manual_seed(0)
        model = OmniDiT(tiny_model_cfg, CodecConfig(sp=2, gt=4))
        settings = EvalSettings(modes=["audio"], steps=1, segment_length=9)
        first = evaluate_model(model, clips, vocab, settings)
        second = evaluate_model(model, clips, vocab, settings)
        assert first.model_dump() == second.model_dump()


def test_zero_lipsync_rate_routes_everything_to_text(tmp_path):
    from omnidesk.training import route_clip

    settings = SynthSettings(num_clips=5, duration=3, size=8, lipsync_rate=0.0)
    summary = write_dataset(tmp_path, settings, heldout=1, seed=2)
    assert summary["audio_eligible"] == 0.0
    assert all("audio" not in route_clip(r) for r in read_manifest(tmp_path / "manifest.jsonl"))
