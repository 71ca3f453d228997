import json

import numpy as np
import pytest
import torch

from omnidesk.bundle import ConditionBundle, ConditionMask
from omnidesk.condition_encoders import Vocabulary, null_text
from omnidesk.config import CodecConfig, SynthSettings
from omnidesk.errors import ConfigError, DimensionMismatchError, EmptyInputError, MissingSignalError, NonFiniteError
from omnidesk.inference import (
    DrivingInputs,
    DrivingRequest,
    cfg_predict,
    generate,
    initial_noise,
    plan_segments,
    resolve_activation,
    sample_segment,
    seam_coherence,
    write_video_output,
)
from omnidesk.latent_codec import PixelVideo
from omnidesk.omnidit import OmniDiT
from omnidesk.synth_eval import synth_clip


def bundle(audio=True, pose=False):
    return ConditionBundle(
        text=null_text(4),
        reference=torch.zeros(1, 2, 2, 48),
        motion=None,
        audio_feats=torch.zeros(5, 12) if audio else None,
        pose_maps=torch.zeros(5, 4, 4, 3) if pose else None,
        mask=ConditionMask(text=True, audio=audio, pose=pose),
    )


def conditioned_field(x_t, t, bundle):
    """1 when audio or text is active, 0 on the dropped branch."""
    return torch.full_like(x_t, 1.0 if (bundle.mask.audio or bundle.mask.text) else 0.0)


class TestActivation:
    @pytest.mark.parametrize(
        "mode,expected",
        [("audio", ["text", "audio"]), ("pose", ["text", "pose"]), ("audio+pose", ["text", "audio", "pose"])],
    )
    def test_modes_activate_weaker_conditions(self, mode, expected):
        req = DrivingRequest(reference_path="r.png", waveform_path="a.wav", skeleton_path="s.jsonl", mode=mode, duration=5)
        assert resolve_activation(req).active() == expected

    def test_missing_audio(self):
        req = DrivingRequest(reference_path="r.png", mode="audio", duration=5)
        with pytest.raises(MissingSignalError):
            resolve_activation(req)

    def test_missing_skeleton(self):
        req = DrivingRequest(reference_path="r.png", waveform_path="a.wav", mode="audio+pose", duration=5)
        with pytest.raises(MissingSignalError):
            resolve_activation(req)

    def test_text_and_audio_can_be_left_out(self):
        req = DrivingRequest(reference_path="r.png", waveform_path="a.wav", duration=5, use_text=False, use_audio=False)
        mask = resolve_activation(req)
        assert mask.active() == []
        assert mask.reference


class TestGuidance:
    def test_scale_one_is_the_conditional_prediction(self):
        x = torch.randn(2, 2, 2, 48)
        calls = []

        def field(x_t, t, b):
            calls.append(b.mask)
            return x_t * 2.0

        assert torch.equal(cfg_predict(field, x, 0.5, bundle(), 1.0), x * 2.0)
        assert len(calls) == 1

    def test_scale_zero_is_the_dropped_prediction(self):
        x = torch.zeros(2, 2, 2, 48)
        assert torch.all(cfg_predict(conditioned_field, x, 0.5, bundle(), 0.0) == 0.0)

    def test_guided_prediction_extrapolates(self):
        x = torch.zeros(1, 2, 2, 48)
        out = cfg_predict(conditioned_field, x, 0.5, bundle(), 6.5)
        assert torch.allclose(out, torch.full_like(x, 6.5))

    def test_pose_stays_in_both_branches(self):
        seen = []

        def field(x_t, t, b):
            seen.append((b.mask.pose, b.pose_maps is not None, b.mask.audio, b.text.is_null))
            return torch.zeros_like(x_t)

        cfg_predict(field, torch.zeros(1, 2, 2, 48), 0.5, bundle(pose=True), 3.0)
        assert (True, True, False, True) in seen
        assert all(pose and has_maps for pose, has_maps, _, _ in seen)

    def test_negative_scale(self):
        with pytest.raises(ConfigError):
            cfg_predict(conditioned_field, torch.zeros(1), 0.5, bundle(), -1.0)


class TestSampler:
    def test_single_step_is_one_euler_step(self):
        x1 = torch.randn(2, 2, 2, 48)
        out = sample_segment(lambda x, t, b: x * 0.5 + t, bundle(), x1, steps=1, cfg_scale=1.0)
        assert torch.allclose(out, x1 - (x1 * 0.5 + 1.0))

    def test_zero_field_returns_the_noise(self):
        x1 = torch.randn(2, 2, 2, 48)
        assert torch.equal(sample_segment(lambda x, t, b: torch.zeros_like(x), bundle(), x1, steps=8), x1)

    def test_euler_is_first_order(self):
        x1 = torch.ones(1, dtype=torch.float64)
        exact = np.exp(-1.0)

        def error(steps):
            out = sample_segment(lambda x, t, b: x, bundle(), x1, steps=steps, cfg_scale=1.0)
            return abs(out.item() - exact)

        for n in (4, 8, 16):
            assert 1.7 <= error(n) / error(2 * n) <= 2.3

    def test_non_finite_state_names_the_step(self):
        field = lambda x, t, b: torch.full_like(x, float("inf")) if t < 0.6 else torch.zeros_like(x)
        with pytest.raises(NonFiniteError) as info:
            sample_segment(field, bundle(), torch.zeros(3), steps=4, cfg_scale=1.0)
        assert info.value.details["step"] == 2

    def test_initial_noise_depends_on_seed_and_segment(self):
        a = initial_noise((2, 3), seed=1, segment=0)
        assert torch.equal(a, initial_noise((2, 3), seed=1, segment=0))
        assert not torch.equal(a, initial_noise((2, 3), seed=1, segment=1))


class TestSegments:
    def test_single_segment(self):
        plan = plan_segments(25, 25, 5)
        assert [s.generate for s in plan.segments] == [(0, 25)]

    def test_overlapping_tiling(self):
        plan = plan_segments(65, 25, 5)
        assert [s.generate for s in plan.segments] == [(0, 25), (25, 45), (45, 65)]
        assert [s.motion_source for s in plan.segments] == [None, (20, 25), (40, 45)]

    @pytest.mark.parametrize("duration", [1, 7, 24, 26, 44, 100, 101])
    def test_every_frame_is_generated_once(self, duration):
        plan = plan_segments(duration, 25, 5)
        covered = [f for s in plan.segments for f in range(*s.generate)]
        assert covered == list(range(duration))
        assert plan.duration == duration
        assert all(s.motion_source[1] == s.generate[0] for s in plan.segments[1:])

    def test_invalid_plans(self):
        with pytest.raises(EmptyInputError):
            plan_segments(0)
        with pytest.raises(ConfigError):
            plan_segments(30, 5, 5)

    @staticmethod
    def ramp_video(plan, seam_step):
        """Every frame brightens by 0.01, except across a seam where it moves by seam_step."""
        starts = [s.generate[0] for s in plan.segments[1:]]
        levels = [0.1]
        for t in range(1, plan.duration):
            levels.append(levels[-1] + (seam_step if t in starts else 0.01))
        return PixelVideo(np.broadcast_to(np.array(levels)[:, None, None, None], (plan.duration, 4, 4, 3)).copy())

    def test_smooth_seams_are_coherent(self):
        plan = plan_segments(65, 25, 5)
        report = seam_coherence(self.ramp_video(plan, 0.005), plan)
        assert report["seams"] == [25, 45]
        assert report["jumps"] == pytest.approx([0.005, 0.005])
        assert report["within"] == pytest.approx(0.01)
        assert report["coherent"]

    def test_a_jump_at_a_seam_is_flagged(self):
        plan = plan_segments(65, 25, 5)
        report = seam_coherence(self.ramp_video(plan, 0.05), plan)
        assert report["jumps"] == pytest.approx([0.05, 0.05])
        assert not report["coherent"]

    def test_seam_report_needs_the_planned_length(self):
        plan = plan_segments(30, 25, 5)
        with pytest.raises(DimensionMismatchError):
            seam_coherence(PixelVideo(np.zeros((29, 4, 4, 3))), plan)


@pytest.fixture
def sprite_inputs():
    clip = synth_clip("sprite", 20, np.random.default_rng(5), SynthSettings(size=8, duration=20))
    vocab = Vocabulary.build([clip.record.caption])
    inputs = DrivingInputs(reference=clip.video.frames[0], caption=clip.record.caption, wave=clip.wave, skeleton=clip.skeleton)
    return inputs, vocab


class TestGenerate:
    @pytest.mark.parametrize("duration", [1, 9, 20])
    def test_output_length_and_determinism(self, tiny_model_cfg, sprite_inputs, duration):
        inputs, vocab = sprite_inputs
        torch.manual_seed(0)
        model = OmniDiT(tiny_model_cfg, CodecConfig(sp=2, gt=4))
        req = DrivingRequest(mode="audio+pose", duration=duration, steps=2, segment_length=9, seed=3)
        first = generate(model, req, inputs, vocab)
        second = generate(model, req, inputs, vocab)
        assert first.video.num_frames == duration
        assert np.array_equal(first.video.frames, second.video.frames)
        assert first.mask.active() == ["text", "audio", "pose"]

    def test_untrained_model_returns_the_initial_noise(self, tiny_model_cfg, sprite_inputs):
        inputs, vocab = sprite_inputs
        model = OmniDiT(tiny_model_cfg, CodecConfig(sp=2, gt=4))
        req = DrivingRequest(mode="audio", duration=9, steps=4, segment_length=9, seed=11)
        result = generate(model, req, inputs, vocab)
        expected = initial_noise(result.latents[0].shape, seed=11, segment=0).double().numpy()
        assert np.array_equal(result.latents[0].grid, expected)

    def test_seams_are_re_encoded_from_emitted_frames(self, tiny_model_cfg, sprite_inputs):
        inputs, vocab = sprite_inputs
        model = OmniDiT(tiny_model_cfg, CodecConfig(sp=2, gt=4))
        seen = []

        def field(x_t, t, b):
            seen.append(None if b.motion is None else b.motion.shape[0])
            return torch.zeros_like(x_t)

        req = DrivingRequest(mode="pose", duration=20, steps=1, segment_length=9, cfg_scale=1.0)
        result = generate(model, req, inputs, vocab, field=field)
        assert [s.generate for s in result.plan.segments] == [(0, 9), (9, 13), (13, 17), (17, 20)]
        assert seen == [None, 2, 2, 2]

    def test_video_output_files(self, tmp_path, tiny_model_cfg, sprite_inputs):
        inputs, vocab = sprite_inputs
        model = OmniDiT(tiny_model_cfg, CodecConfig(sp=2, gt=4))
        req = DrivingRequest(mode="audio", duration=12, steps=1, segment_length=9, seed=2)
        result = generate(model, req, inputs, vocab)
        manifest = write_video_output(tmp_path, result, req, config_hash="abc", dump_latents=True)
        assert manifest["num_frames"] == 12
        assert manifest["conditions"] == ["text", "audio"]
        assert len(list(tmp_path.glob("frame_*.png"))) == 12
        assert len(list(tmp_path.glob("segment_*.olc"))) == 2
        assert manifest["seam_coherence"]["seams"] == [9]
        assert np.array_equal(np.load(tmp_path / "frames.npy"), result.video.frames)
        assert json.loads((tmp_path / "manifest.json").read_text())["video_hash"] == manifest["video_hash"]
