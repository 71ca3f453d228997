import librosa
import numpy as np
import pytest
import torch

from omnidesk.condition_encoders import (
    JOINT_NAMES,
    LOG_FLOOR,
    NULL_ID,
    PAD_ID,
    SAMPLES_PER_FRAME,
    UNK_ID,
    PoseGuider,
    SkeletonSequence,
    Vocabulary,
    assemble_audio_tokens,
    encode_pose_features,
    encode_text,
    extract_audio_features,
    load_skeleton,
    null_text,
    pool_audio_per_latent_frame,
    rasterize_skeleton,
    save_skeleton,
)
from omnidesk.errors import EmptyInputError, KeypointRangeError, SampleRateError


def tone(num_frames, start, stop, freq=440.0):
    wave = np.zeros(num_frames * SAMPLES_PER_FRAME)
    t = np.arange(wave.size) / 16000.0
    lo, hi = start * SAMPLES_PER_FRAME, stop * SAMPLES_PER_FRAME
    wave[lo:hi] = 0.5 * np.sin(2 * np.pi * freq * t[lo:hi])
    return wave


def still_skeleton(num_frames=3):
    keypoints = np.tile(
        np.array([[0.5, 0.3], [0.5, 0.5], [0.3, 0.55], [0.7, 0.55], [0.25, 0.65], [0.75, 0.65], [0.2, 0.8], [0.8, 0.8]]),
        (num_frames, 1, 1),
    )
    return SkeletonSequence(keypoints, np.ones((num_frames, len(JOINT_NAMES)), dtype=bool))


class TestAudioFeatures:
    def test_one_row_per_frame(self):
        feats = extract_audio_features(tone(10, 2, 6), 10, bands=4)
        assert feats.shape == (10, 12)

    def test_silence_maps_to_log_floor(self):
        feats = extract_audio_features(np.zeros(5 * SAMPLES_PER_FRAME), 5, bands=4)
        assert np.all(feats == np.log(LOG_FLOOR))

    def test_energy_follows_the_tone(self):
        feats = extract_audio_features(tone(12, 4, 8), 12, bands=8)
        assert feats[5].max() > feats[0].max() + 10.0
        assert feats[6].max() > feats[11].max() + 10.0

    def test_short_wave_is_zero_padded(self):
        feats = extract_audio_features(tone(4, 0, 4), 8, bands=4)
        assert feats.shape == (8, 12)
        assert np.all(feats[-1] == np.log(LOG_FLOOR))

    def test_wrong_sample_rate(self):
        with pytest.raises(SampleRateError):
            extract_audio_features(np.ones(100), 1, sample_rate=22050)

    def test_empty_wave(self):
        with pytest.raises(EmptyInputError):
            extract_audio_features(np.zeros(0), 3)

    @pytest.mark.parametrize("frame", [0, 3, 6])
    def test_matches_a_direct_dft(self, rng, frame):
        num_frames, bands = 7, 8
        wave = 0.1 * rng.standard_normal(num_frames * SAMPLES_PER_FRAME - 100)
        feats = extract_audio_features(wave, num_frames, bands=bands)

        center = frame * SAMPLES_PER_FRAME + SAMPLES_PER_FRAME // 2
        expected = []
        for ms in (10, 20, 40):
            n_fft = 16 * ms
            n = np.arange(n_fft)
            index = center + n - n_fft // 2
            x = np.where((index >= 0) & (index < wave.size), wave[np.clip(index, 0, wave.size - 1)], 0.0)
            w = 0.5 - 0.5 * np.cos(2 * np.pi * n / n_fft)
            power = np.array([
                abs(np.sum(x * w * np.exp(-2j * np.pi * k * n / n_fft))) ** 2 for k in range(n_fft // 2 + 1)
            ])
            fb = librosa.filters.mel(
                sr=16000, n_fft=n_fft, n_mels=bands, fmin=0.0, fmax=8000.0, htk=True, norm=None, dtype=np.float64
            )
            expected.append(np.log(np.maximum(fb @ power, LOG_FLOOR)))
        np.testing.assert_allclose(feats[frame], np.concatenate(expected), rtol=0, atol=1e-9)


class TestAudioTokens:
    def test_window_replicates_edges(self):
        feats = torch.arange(5, dtype=torch.float32)[:, None].repeat(1, 2)
        tokens = assemble_audio_tokens(feats, 2, lambda x: x)
        assert tokens.shape == (5, 5, 2)
        assert tokens[0, :, 0].tolist() == [0, 0, 0, 1, 2]
        assert tokens[4, :, 0].tolist() == [2, 3, 4, 4, 4]

    def test_pooling_follows_causal_groups(self, codec):
        tokens = torch.randn(9, 3, 6)
        sets, mask = pool_audio_per_latent_frame(tokens, codec)
        assert sets.shape == (3, 12, 6)
        assert mask.sum(dim=1).tolist() == [3, 12, 12]
        assert torch.equal(sets[1, :3], tokens[1])
        assert torch.all(sets[0, 3:] == 0)

    def test_pooling_checks_latent_length(self, codec):
        from omnidesk.errors import DimensionMismatchError

        with pytest.raises(DimensionMismatchError):
            pool_audio_per_latent_frame(torch.randn(9, 1, 4), codec, latent_frames=4)


class TestPose:
    def test_skeleton_file(self, tmp_path):
        skeleton = still_skeleton()
        skeleton.visible[1, 6] = False
        save_skeleton(tmp_path / "s.jsonl", skeleton)
        loaded = load_skeleton(tmp_path / "s.jsonl")
        np.testing.assert_allclose(loaded.keypoints, skeleton.keypoints)
        assert not loaded.visible[1, 6]

    def test_rasterized_maps_draw_bones(self):
        maps = rasterize_skeleton(still_skeleton(), 16, 16)
        assert maps.shape == (3, 16, 16, 3)
        assert maps.dtype == np.float32
        assert maps.max() > 0.5
        assert maps[:, 0, 0].sum() == 0.0

    def test_invisible_joints_are_omitted(self):
        skeleton = still_skeleton(1)
        skeleton.visible[:] = False
        assert rasterize_skeleton(skeleton, 16, 16).sum() == 0.0

    def test_out_of_range_keypoints(self):
        skeleton = still_skeleton(1)
        skeleton.keypoints[0, 0, 0] = 1.2
        with pytest.raises(KeypointRangeError):
            rasterize_skeleton(skeleton, 16, 16)

    def test_mirrored_flips_x(self):
        mirrored = still_skeleton(1).mirrored()
        assert mirrored.keypoints[0, 6, 0] == pytest.approx(0.8)

    def test_mirrored_skeleton_renders_the_flipped_map(self, rng):
        keypoints = rng.uniform(0.05, 0.95, (4, len(JOINT_NAMES), 2))
        skeleton = SkeletonSequence(keypoints, rng.random((4, len(JOINT_NAMES))) > 0.2)
        maps = rasterize_skeleton(skeleton, 16, 20)
        mirrored = rasterize_skeleton(skeleton.mirrored(), 16, 20)
        assert maps.max() > 0.5
        np.testing.assert_allclose(mirrored, maps[:, :, ::-1], rtol=0, atol=1e-6)

    def test_guider_starts_at_zero(self, codec):
        guider = PoseGuider(codec.sp, (4, 8), out_channels=3)
        maps = torch.from_numpy(rasterize_skeleton(still_skeleton(5), 8, 8))
        grid = encode_pose_features(maps, codec, guider, latent_shape=(2, 4, 4, codec.channels))
        assert grid.shape == (2, 4, 4, codec.gt * 3)
        assert torch.all(grid == 0)

    def test_guider_receptive_field_is_local(self, codec):
        guider = PoseGuider(codec.sp, (4, 8), out_channels=3)
        torch.nn.init.normal_(guider.conv_out.weight)
        maps = torch.rand(1, 3, 16, 16)
        base = guider(maps)
        lo, hi = guider.receptive_field(1)
        perturbed = maps.clone()
        perturbed[..., hi + 1:] += 1.0
        changed = guider(perturbed)
        torch.testing.assert_close(base[..., :, 1], changed[..., :, 1], rtol=0.0, atol=1e-6)
        assert (base[..., :, -1] - changed[..., :, -1]).abs().max() > 1e-3


class TestText:
    def test_vocabulary_ranks_by_frequency_then_name(self):
        vocab = Vocabulary.build(["b a", "a c", "a b"], size=5)
        assert vocab.itos[3:] == ["a", "b"]
        assert vocab.lookup("c") == UNK_ID

    def test_vocabulary_file(self, tmp_path):
        vocab = Vocabulary.build(["red person waving"])
        vocab.save(tmp_path / "vocab.json")
        assert Vocabulary.load(tmp_path / "vocab.json").itos == vocab.itos

    def test_encode_pads_and_truncates(self):
        vocab = Vocabulary.build(["red person waving"])
        ids = encode_text("Red person waving hello", vocab, text_len=6).ids.tolist()
        assert ids[:3] == [vocab.lookup("red"), vocab.lookup("person"), vocab.lookup("waving")]
        assert ids[3] == UNK_ID
        assert ids[4:] == [PAD_ID, PAD_ID]
        assert len(encode_text("red " * 10, vocab, text_len=4).ids) == 4

    def test_null_caption(self):
        vocab = Vocabulary.build(["red"])
        tokens = encode_text(None, vocab, text_len=4)
        assert tokens.is_null
        assert tokens.ids.tolist() == null_text(4).ids.tolist() == [NULL_ID, PAD_ID, PAD_ID, PAD_ID]
