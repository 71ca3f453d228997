import numpy as np
import pytest

from omnidesk.config import CodecConfig, ModelConfig, RunConfig, TrainPlan, load_run_config
from omnidesk.errors import ConfigError


def write(path, text):
    path.write_text(text)
    return str(path)


def test_defaults_load_without_a_file():
    cfg = load_run_config()
    assert [p.stage for p in cfg.plans] == [1, 2, 3]
    assert cfg.model.hidden_size == 128


def test_hash_ignores_key_order(tmp_path):
    a = write(tmp_path / "a.toml", "seed = 3\n[model]\nhidden_size = 24\nnum_heads = 2\n[eval]\nsteps = 4\ncfg_scale = 2.0\n")
    b = write(tmp_path / "b.toml", "[eval]\ncfg_scale = 2.0\nsteps = 4\n[model]\nnum_heads = 2\nhidden_size = 24\n\n")
    b_cfg = load_run_config(b, {"seed": 3})
    assert load_run_config(a).config_hash() == b_cfg.config_hash()


def test_hash_changes_with_content(tmp_path):
    assert load_run_config(None, {"seed": 1}).config_hash() != load_run_config(None, {"seed": 2}).config_hash()


def test_unknown_keys_are_all_reported(tmp_path):
    path = write(tmp_path / "bad.toml", "colour = 1\n[model]\nhidden = 3\n")
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    assert len(info.value.problems) == 2
    assert info.value.exit_code == 2


def test_plans_must_be_ordered(tmp_path):
    path = write(tmp_path / "plans.toml", "[[plans]]\nstage = 2\n[[plans]]\nstage = 1\n[[plans]]\nstage = 3\n")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "nope.toml"))
    with pytest.raises(ConfigError):
        load_run_config(write(tmp_path / "broken.toml", "seed = \n"))


def test_head_dim_must_support_rope():
    with pytest.raises(ValueError):
        ModelConfig(hidden_size=8, num_heads=2)


def test_stage_ratios_zero_out_inactive_conditions():
    assert TrainPlan(stage=1).keep_ratios() == {"text": 0.9, "audio": 0.0, "pose": 0.0}
    assert TrainPlan(stage=2, active=["pose", "text"]).keep_ratios() == {"text": 0.9, "audio": 0.0, "pose": 0.25}
    with pytest.raises(ValueError):
        TrainPlan(stage=2, active=["audio"])


def test_codec_norm_applies_the_fitted_std():
    codec = CodecConfig(sp=1, gt=1, mean=[0.1, 0.2, 0.3], std=[0.3, 1.0, 3.0])
    mean, scale = codec.norm_arrays()
    assert scale.tolist() == [0.3, 1.0, 3.0]
    assert mean[0] == float(np.float32(0.1))


def test_model_hash_ignores_training_settings():
    a = RunConfig(seed=1)
    b = RunConfig(seed=2, log_every=3)
    assert a.model_hash() == b.model_hash()
    assert a.config_hash() != b.config_hash()
