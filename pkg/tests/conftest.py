import numpy as np
import pytest
import torch

from omnidesk.config import (
    AblationSettings,
    CodecConfig,
    EvalSettings,
    ModelConfig,
    PathsConfig,
    RunConfig,
    SynthSettings,
    default_plans,
)
from omnidesk.synth_eval import write_dataset
from omnidesk.training import load_training_data


@pytest.fixture
def codec() -> CodecConfig:
    return CodecConfig(sp=2, gt=4)


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        hidden_size=24,
        num_blocks=1,
        num_heads=2,
        mlp_ratio=2,
        text_len=8,
        vocab_size=64,
        pose_channels=4,
        guider_channels=(4, 8),
        audio_window=1,
        audio_mel_bands=4,
    )


@pytest.fixture
def tiny_run_cfg(tmp_path, tiny_model_cfg) -> RunConfig:
    return RunConfig(
        seed=0,
        model=tiny_model_cfg,
        plans=default_plans(2, batch_size=2),
        synth=SynthSettings(num_clips=6, duration=9, size=8, lipsync_rate=0.5, pose_visible_rate=0.5, vocab_words=64),
        eval=EvalSettings(num_clips=2, steps=1, segment_length=9, modes=["audio", "pose"]),
        ablation=AblationSettings(cells=["ratio_A>P"], seeds=[0], steps_per_stage=0, val_clips=2, eval_clips=0),
        paths=PathsConfig(data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "run")),
        log_every=1,
    )


@pytest.fixture
def tiny_dataset(tiny_run_cfg):
    """A written synthetic dataset plus the config with fitted codec stats."""
    write_dataset(tiny_run_cfg.paths.data_dir, tiny_run_cfg.synth, tiny_run_cfg.eval.num_clips, seed=0)
    data, cfg = load_training_data(tiny_run_cfg)
    return data, cfg


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
