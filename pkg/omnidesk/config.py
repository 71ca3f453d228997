"""
omnidesk configuration

Typed configuration for every component, the merged ``RunConfig`` read from a
TOML file, and process-level settings loaded from the environment (.env).

Key components:
- CodecConfig / ModelConfig / TrainPlan / EvalSettings / SynthSettings
- RunConfig: merged, hash-identified view of a whole experiment
- Environment settings: OMNI_THREADS, OMNI_LOG_LEVEL, OMNI_CACHE_DIR
"""

import os
import json
import math
import hashlib
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Any

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from omnidesk.errors import ConfigError

# Load environment variables
load_dotenv()

OMNI_THREADS = int(os.getenv("OMNI_THREADS", "0"))
OMNI_LOG_LEVEL = os.getenv("OMNI_LOG_LEVEL", "INFO").upper()
ENABLE_CACHE = os.getenv("OMNI_ENABLE_CACHE", "true").lower() == "true"
CACHE_DIR = Path(os.getenv("OMNI_CACHE_DIR", ".omni_cache"))

CONDITIONS = ("text", "audio", "pose")

# Stage -> conditions trained in that stage (weak to strong)
DEFAULT_STAGE_CONDITIONS = {
    1: ["text"],
    2: ["text", "audio"],
    3: ["text", "audio", "pose"],
}

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for an entrypoint."""
    logging.basicConfig(
        level=getattr(logging, (level or OMNI_LOG_LEVEL), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(message)s",
    )


def apply_thread_limit(requested: Optional[int] = None) -> int:
    """Cap torch intra-op threads by OMNI_THREADS. Returns the effective cap (0 = unlimited)."""
    import torch

    cap = OMNI_THREADS
    if requested:
        cap = min(requested, cap) if cap else requested
    if cap > 0:
        torch.set_num_threads(cap)
    return cap


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class CodecConfig(_Strict):
    """Causal patch codec geometry plus per-channel latent normalization."""

    sp: int = Field(2, ge=1, description="Spatial patch size")
    gt: int = Field(4, ge=1, description="Temporal group size")
    mean: Optional[List[float]] = Field(None, description="Per-channel latent mean (None = 0)")
    std: Optional[List[float]] = Field(None, description="Per-channel latent std (None = 1)")

    @property
    def channels(self) -> int:
        return 3 * self.sp * self.sp * self.gt

    @model_validator(mode="after")
    def _check_norm(self) -> "CodecConfig":
        for name in ("mean", "std"):
            values = getattr(self, name)
            if values is not None and len(values) != self.channels:
                raise ValueError(f"{name} has {len(values)} entries, expected {self.channels}")
        if self.std is not None and any(not (s > 0) for s in self.std):
            raise ValueError("std entries must be > 0")
        return self

    def norm_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Applied normalization: mean rounded to float32, std as fitted.

        A float32 mean keeps ``x - mean`` exact in float64 for float32 pixels.
        """
        mean = np.zeros(self.channels) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        std = np.ones(self.channels) if self.std is None else np.asarray(self.std, dtype=np.float64)
        mean = mean.astype(np.float32).astype(np.float64)
        return mean, std

    @property
    def stats_id(self) -> str:
        mean, scale = self.norm_arrays()
        digest = hashlib.sha1()
        digest.update(f"sp={self.sp};gt={self.gt};".encode())
        digest.update(mean.tobytes())
        digest.update(scale.tobytes())
        return digest.hexdigest()[:16]


class ModelConfig(_Strict):
    """Denoiser hyperparameters. Desk defaults: D=128, 4 blocks, 4 heads."""

    hidden_size: int = Field(128, ge=6, description="Model hidden size D")
    num_blocks: int = Field(4, ge=1)
    num_heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    text_len: int = Field(32, ge=1, description="Lmax, padded caption length")
    vocab_size: int = Field(1024, ge=8)
    rope_base: float = Field(10000.0, gt=1.0)
    pose_channels: int = Field(8, ge=1, description="Pose guider output channels per pixel frame")
    guider_channels: Tuple[int, int] = Field((16, 32), description="Hidden channels of the pose guider stages")
    max_motion_frames: int = Field(5, ge=0, description="M, max latent motion frames packed")
    audio_window: int = Field(2, ge=0, description="w, audio window radius (k = 2w+1 tokens per frame)")
    audio_mlp_depth: int = Field(2, ge=1)
    audio_mel_bands: int = Field(16, ge=2, description="Filterbank bands per analysis scale")
    joint_attention: bool = Field(True, description="Disable to isolate the audio cross-attention path")

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        head_dim = self.hidden_size // self.num_heads
        if head_dim % 2 or head_dim < 6:
            raise ValueError("head dim must be even and at least 6 for 3-axis RoPE")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def audio_tokens_per_frame(self) -> int:
        return 2 * self.audio_window + 1


class TrainPlan(_Strict):
    """One stage of the omni-conditions schedule."""

    stage: int = Field(..., ge=1, le=3)
    active: Optional[List[str]] = Field(None, description="Conditions trained this stage (default by stage)")
    ratio_text: float = Field(0.9, ge=0.0, le=1.0, description="T keep ratio")
    ratio_audio: float = Field(0.5, ge=0.0, le=1.0, description="A keep ratio")
    ratio_pose: float = Field(0.25, ge=0.0, le=1.0, description="P keep ratio")
    motion_prob: float = Field(0.5, ge=0.0, le=1.0, description="Probability of a motion-frame prefix")
    steps: int = Field(1000, ge=0)
    lr: float = Field(1e-4, ge=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    grad_clip: float = Field(1.0, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.95)
    batch_size: int = Field(16, ge=1)
    seed: int = 0

    @field_validator("active")
    @classmethod
    def _known_conditions(cls, value: Optional[List[str]]) -> Optional[List[str]]:
        if value is None:
            return value
        unknown = [c for c in value if c not in CONDITIONS]
        if unknown:
            raise ValueError(f"unknown conditions {unknown}")
        if "text" not in value:
            raise ValueError("text is trained in every stage")
        return [c for c in CONDITIONS if c in value]

    @property
    def active_conditions(self) -> List[str]:
        return self.active if self.active is not None else DEFAULT_STAGE_CONDITIONS[self.stage]

    def keep_ratios(self) -> Dict[str, float]:
        """Effective keep ratio per condition; conditions the stage does not train are 0."""
        ratios = {"text": self.ratio_text, "audio": self.ratio_audio, "pose": self.ratio_pose}
        return {c: (ratios[c] if c in self.active_conditions else 0.0) for c in CONDITIONS}


def default_plans(steps: int = 1000, **overrides: Any) -> List[TrainPlan]:
    """Three-stage desk schedule: text, then +audio, then +pose."""
    return [TrainPlan(stage=s, steps=steps, **overrides) for s in (1, 2, 3)]


class SynthSettings(_Strict):
    num_clips: int = Field(200, ge=1)
    duration: int = Field(25, ge=1, description="Pixel frames per clip")
    size: int = Field(16, ge=8, description="Sprite canvas height = width")
    lipsync_rate: float = Field(0.3, ge=0.0, le=1.0)
    pose_visible_rate: float = Field(0.5, ge=0.0, le=1.0)
    aesthetic_rate: float = Field(0.9, ge=0.0, le=1.0)
    vocab_words: int = Field(1024, ge=8)


class EvalSettings(_Strict):
    modes: List[str] = Field(default_factory=lambda: ["audio", "pose", "audio+pose"])
    cfg_scale: float = Field(6.5, ge=0.0)
    steps: int = Field(32, ge=1)
    segment_length: int = Field(25, ge=2, description="Lseg pixel frames per segment")
    motion_frames: int = Field(5, ge=1, description="Pixel frames carried between segments")
    num_clips: int = Field(50, ge=1)

    @field_validator("modes")
    @classmethod
    def _known_modes(cls, value: List[str]) -> List[str]:
        unknown = [m for m in value if m not in ("audio", "pose", "audio+pose")]
        if unknown:
            raise ValueError(f"unknown modes {unknown}")
        return value


class AblationSettings(_Strict):
    cells: List[str] = Field(
        default_factory=lambda: [
            "tdata_0", "tdata_25", "tdata_50", "tdata_100",
            "order_IA", "order_IPA", "order_IAP",
            "ratio_A>P", "ratio_A<P",
        ]
    )
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    steps_per_stage: int = Field(200, ge=0)
    val_clips: int = Field(16, ge=1)
    eval_clips: int = Field(4, ge=0, description="Held-out clips generated per cell for sync/pose metrics")


class PathsConfig(_Strict):
    data_dir: str = "data/synth"
    out_dir: str = "runs/default"


class RunConfig(_Strict):
    """Merged view of an experiment; ``config_hash`` identifies it."""

    seed: int = 0
    codec: CodecConfig = Field(default_factory=CodecConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    plans: List[TrainPlan] = Field(default_factory=default_plans)
    synth: SynthSettings = Field(default_factory=SynthSettings)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    ablation: AblationSettings = Field(default_factory=AblationSettings)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(0, ge=0, description="Mid-stage checkpoint interval (0 = stage boundaries only)")

    @field_validator("plans")
    @classmethod
    def _ordered(cls, plans: List[TrainPlan]) -> List[TrainPlan]:
        if [p.stage for p in plans] != [1, 2, 3]:
            raise ValueError("plans must be ordered stage 1, 2, 3")
        return plans

    def config_hash(self) -> str:
        """sha256 of the canonical JSON dump; stable under key reordering."""
        return hash_payload(self.model_dump(mode="json"))

    def model_hash(self) -> str:
        """Hash of the parts a checkpoint depends on (codec geometry + model)."""
        codec = self.codec.model_dump(mode="json")
        return hash_payload({"model": self.model.model_dump(mode="json"), "sp": codec["sp"], "gt": codec["gt"]})


def hash_payload(payload: Any) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _format_errors(error: ValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in error.errors()]


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load and validate a TOML run config.

    Args:
        path: TOML file path, or None for all defaults
        overrides: top-level keys applied after the file (e.g. seed, paths)

    Returns:
        A validated RunConfig

    Raises:
        ConfigError: listing every validation problem at once
    """
    raw: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config file is not valid TOML: {e}")

    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value

    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = _format_errors(e)
        raise ConfigError(f"{len(problems)} configuration problem(s)", problems=problems)

    logger.info(f"Loaded run config {config.config_hash()[:12]} from {path or '<defaults>'}")
    return config
