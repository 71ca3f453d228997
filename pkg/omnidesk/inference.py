"""
Inference engine

Condition activation, classifier-free guidance on audio and text, an Euler
sampler for the rectified flow, and long videos chained segment by segment
through motion frames.

Key components:
- DrivingRequest / DrivingInputs: what to animate and with which signals
- resolve_activation: mode -> ConditionMask
- cfg_predict / sample_segment: guided Euler integration from t=1 to t=0
- plan_segments / generate: tiling a duration into overlapping segments
- seam_coherence: jump at each segment boundary against in-segment motion
- write_video_output: PNG frame directory plus manifest
"""

import json
import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Literal, Optional, Protocol, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field
from scipy.io import wavfile
from tqdm import tqdm

from omnidesk.bundle import ConditionBundle, ConditionMask, denoise
from omnidesk.condition_encoders import (
    SAMPLE_RATE,
    SkeletonSequence,
    SpectralFeatureExtractor,
    Vocabulary,
    encode_text,
    load_skeleton,
    null_text,
    rasterize_skeleton,
)
from omnidesk.errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyInputError,
    MissingSignalError,
    NonFiniteError,
    SampleRateError,
)
from omnidesk.latent_codec import FPS, PixelVideo, VideoLatent, encode_video, decode_video, latent_frame_count, save_latent
from omnidesk.omnidit import OmniDiT

logger = logging.getLogger(__name__)


class DrivingRequest(BaseModel):
    """A generation request, as read from a request JSON file."""

    reference_path: str = Field("", description="Reference image (PNG) or [H, W, 3] .npy")
    caption: Optional[str] = Field(None, description="Caption; empty or missing gives the NULL text condition")
    waveform_path: Optional[str] = Field(None, description="16 kHz WAV driving audio")
    skeleton_path: Optional[str] = Field(None, description="Skeleton JSONL driving pose")
    mode: Literal["audio", "pose", "audio+pose"] = "audio"
    duration: int = Field(..., ge=1, description="Output length in pixel frames")
    cfg_scale: float = Field(6.5, ge=0.0)
    steps: int = Field(32, ge=1)
    seed: int = 0
    use_text: bool = Field(True, description="Set false to leave text inactive")
    use_audio: bool = Field(True, description="Set false to null the audio a mode would activate")
    segment_length: int = Field(25, ge=2)
    motion_frames: int = Field(5, ge=1)


@dataclass
class DrivingInputs:
    reference: np.ndarray  # [H, W, 3] float32 in [0, 1]
    caption: Optional[str] = None
    wave: Optional[np.ndarray] = None
    skeleton: Optional[SkeletonSequence] = None


def load_driving_inputs(req: DrivingRequest, root: Path = Path(".")) -> DrivingInputs:
    root = Path(root)
    ref_path = root / req.reference_path
    if not req.reference_path or not ref_path.exists():
        raise MissingSignalError(f"reference image not found: {ref_path}", signal="reference")
    if ref_path.suffix == ".npy":
        reference = np.load(ref_path).astype(np.float32)
    else:
        reference = np.asarray(Image.open(ref_path).convert("RGB"), dtype=np.float32) / 255.0

    wave = None
    if req.waveform_path:
        rate, pcm = wavfile.read(root / req.waveform_path)
        if rate != SAMPLE_RATE:
            raise SampleRateError(f"driving audio is sampled at {rate} Hz, expected {SAMPLE_RATE}")
        wave = pcm.astype(np.float64) / 32768.0 if pcm.dtype == np.int16 else pcm.astype(np.float64)
    skeleton = load_skeleton(root / req.skeleton_path) if req.skeleton_path else None
    return DrivingInputs(reference=reference, caption=req.caption, wave=wave, skeleton=skeleton)


def resolve_activation(req: DrivingRequest, inputs: Optional[DrivingInputs] = None) -> ConditionMask:
    """
    Activating a condition activates every weaker one: audio mode uses
    {text, audio}, pose mode {text, pose}, audio+pose all three.

    Raises:
        MissingSignalError: a signal the mode needs was not supplied
    """
    needs_audio = req.mode in ("audio", "audio+pose")
    needs_pose = req.mode in ("pose", "audio+pose")
    has_audio = inputs.wave is not None if inputs else bool(req.waveform_path)
    has_pose = inputs.skeleton is not None if inputs else bool(req.skeleton_path)
    if needs_audio and not has_audio:
        raise MissingSignalError(f"mode {req.mode} needs a waveform", signal="audio")
    if needs_pose and not has_pose:
        raise MissingSignalError(f"mode {req.mode} needs a skeleton sequence", signal="pose")
    return ConditionMask(text=req.use_text, audio=needs_audio and req.use_audio, pose=needs_pose, motion_frames=False)


# ---------------------------------------------------------------------------
# Guidance and sampling
# ---------------------------------------------------------------------------

class VelocityField(Protocol):
    def __call__(self, x_t: torch.Tensor, t: float, bundle: ConditionBundle) -> torch.Tensor: ...


class ModelField:
    """Wraps the denoiser as a gradient-free velocity field."""

    def __init__(self, model: OmniDiT):
        self.model = model.eval()

    def __call__(self, x_t: torch.Tensor, t: float, bundle: ConditionBundle) -> torch.Tensor:
        with torch.no_grad():
            return denoise(self.model, bundle, x_t, t)


def cfg_predict(field: VelocityField, x_t: torch.Tensor, t: float, bundle: ConditionBundle, cfg_scale: float) -> torch.Tensor:
    """
    v = v_drop + s (v_full - v_drop), where v_drop nulls audio and text
    together. Pose, reference and motion frames stay in both branches.
    """
    if cfg_scale < 0:
        raise ConfigError(f"cfg_scale must be >= 0, got {cfg_scale}")
    if cfg_scale == 1.0:
        return field(x_t, t, bundle)
    v_drop = field(x_t, t, bundle.without_audio_and_text())
    if cfg_scale == 0.0:
        return v_drop
    v_full = field(x_t, t, bundle)
    return v_drop + cfg_scale * (v_full - v_drop)


def initial_noise(shape: Tuple[int, ...], seed: int, segment: int = 0) -> torch.Tensor:
    rng = np.random.default_rng(np.random.SeedSequence([seed, segment]))
    return torch.from_numpy(rng.standard_normal(shape)).float()


def sample_segment(
    field: VelocityField,
    bundle: ConditionBundle,
    x1: torch.Tensor,
    steps: int = 32,
    cfg_scale: float = 6.5,
) -> torch.Tensor:
    """
    Euler integration on the uniform grid t = 1, 1 - 1/steps, ..., 0:
    x_{t-dt} = x_t - dt * v(x_t, t).

    Raises:
        NonFiniteError: naming the first step whose state is not finite
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    grid = np.linspace(1.0, 0.0, steps + 1)
    x = x1
    for i in range(steps):
        t, t_next = float(grid[i]), float(grid[i + 1])
        x = x - (t - t_next) * cfg_predict(field, x, t, bundle, cfg_scale)
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"sampler state became non-finite at step {i}", step=i)
    return x


# ---------------------------------------------------------------------------
# Long videos
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    generate: Tuple[int, int]
    motion_source: Optional[Tuple[int, int]]

    @property
    def length(self) -> int:
        return self.generate[1] - self.generate[0]


@dataclass(frozen=True)
class SegmentPlan:
    segments: List[Segment]
    segment_length: int
    overlap: int

    @property
    def duration(self) -> int:
        return self.segments[-1].generate[1]


def plan_segments(duration: int, segment_length: int = 25, overlap: int = 5) -> SegmentPlan:
    """
    Tile ``[0, duration)``. The first segment generates ``segment_length``
    frames; each later one generates ``segment_length - overlap`` new frames
    conditioned on the previous ``overlap`` frames. The last may be shorter.
    """
    if duration <= 0:
        raise EmptyInputError(f"duration must be positive, got {duration}")
    if segment_length <= overlap:
        raise ConfigError(f"segment length {segment_length} must exceed the motion overlap {overlap}")

    segments = [Segment(generate=(0, min(segment_length, duration)), motion_source=None)]
    while segments[-1].generate[1] < duration:
        start = segments[-1].generate[1]
        stop = min(start + segment_length - overlap, duration)
        segments.append(Segment(generate=(start, stop), motion_source=(start - overlap, start)))
    return SegmentPlan(segments=segments, segment_length=segment_length, overlap=overlap)


def seam_coherence(video: PixelVideo, plan: SegmentPlan) -> Dict[str, object]:
    """
    Temporal coherence at segment boundaries.

    Each seam's jump is the mean absolute pixel difference between the last
    motion-source frame and the first generated frame of the next segment.
    ``within`` is the mean consecutive-frame difference over every pair that
    does not cross a seam. ``coherent`` holds when every jump is below it.
    """
    if video.num_frames != plan.duration:
        raise DimensionMismatchError(f"video has {video.num_frames} frames, plan covers {plan.duration}")
    frames = video.frames.astype(np.float64)
    steps = np.abs(np.diff(frames, axis=0)).mean(axis=(1, 2, 3))
    starts = [s.generate[0] for s in plan.segments[1:]]
    jumps = [float(steps[start - 1]) for start in starts]
    inside = np.ones(len(steps), dtype=bool)
    inside[np.array(starts, dtype=int) - 1] = False
    within = float(steps[inside].mean()) if inside.any() else float("nan")
    return {
        "seams": starts,
        "jumps": jumps,
        "within": within,
        "coherent": bool(all(jump < within for jump in jumps)),
    }


@dataclass
class GenerationResult:
    video: PixelVideo
    mask: ConditionMask
    plan: SegmentPlan
    latents: List[VideoLatent]


def generate(
    model: OmniDiT,
    req: DrivingRequest,
    inputs: DrivingInputs,
    vocab: Vocabulary,
    field: Optional[VelocityField] = None,
    progress: bool = False,
) -> GenerationResult:
    """
    Generate ``req.duration`` frames.

    Segments run in order; each one after the first re-encodes the last
    ``req.motion_frames`` emitted frames of its predecessor as motion
    latents. Seam frames are emitted exactly once.
    """
    codec = model.codec
    cfg = model.cfg
    field = field or ModelField(model)
    mask = resolve_activation(req, inputs)
    plan = plan_segments(req.duration, req.segment_length, req.motion_frames)
    logger.info(f"Resolved conditions {mask.active()}; {len(plan.segments)} segment(s) for {req.duration} frames")

    reference = np.asarray(inputs.reference, dtype=np.float32)
    height, width = reference.shape[:2]
    z_ref = torch.from_numpy(encode_video(PixelVideo(reference[None]), codec).grid).float()
    text = encode_text(inputs.caption or None, vocab, cfg.text_len) if mask.text else null_text(cfg.text_len)

    audio_feats = None
    if mask.audio:
        extractor = SpectralFeatureExtractor(cfg.audio_mel_bands)
        audio_feats = torch.from_numpy(extractor(inputs.wave, req.duration)).float()
    pose_maps = None
    if mask.pose:
        if inputs.skeleton.num_frames < req.duration:
            raise DimensionMismatchError(
                f"skeleton has {inputs.skeleton.num_frames} frames, request needs {req.duration}"
            )
        maps = rasterize_skeleton(inputs.skeleton.slice(0, req.duration), height, width)
        pose_maps = torch.from_numpy(maps)

    frames: List[np.ndarray] = []
    latents: List[VideoLatent] = []
    for index, segment in enumerate(tqdm(plan.segments, desc="segments", disable=not progress)):
        start, stop = segment.generate
        motion = None
        if segment.motion_source is not None:
            lo, hi = segment.motion_source
            tail = np.concatenate(frames, axis=0)[lo:hi]
            motion = torch.from_numpy(encode_video(PixelVideo(tail), codec).grid).float()
        bundle = ConditionBundle(
            text=text,
            reference=z_ref,
            motion=motion,
            audio_feats=None if audio_feats is None else audio_feats[start:stop],
            pose_maps=None if pose_maps is None else pose_maps[start:stop],
            mask=replace(mask, motion_frames=motion is not None),
        )
        shape = (latent_frame_count(segment.length, codec.gt), height // codec.sp, width // codec.sp, codec.channels)
        try:
            x0 = sample_segment(field, bundle, initial_noise(shape, req.seed, index), req.steps, req.cfg_scale)
        except NonFiniteError as e:
            raise NonFiniteError(f"segment {index} [{start}, {stop}): {e.message}", segment=index, **e.details)
        latent = VideoLatent(grid=x0.double().numpy(), stats_id=codec.stats_id, num_frames=segment.length)
        latents.append(latent)
        frames.append(decode_video(latent, codec, display=True).frames)
        logger.debug(f"segment {index}: frames [{start}, {stop}) motion {segment.motion_source}")

    video = PixelVideo(frames=np.concatenate(frames, axis=0), fps=FPS)
    return GenerationResult(video=video, mask=mask, plan=plan, latents=latents)


def video_hash(video: PixelVideo) -> str:
    return hashlib.sha256(np.ascontiguousarray(video.frames).tobytes()).hexdigest()


def write_video_output(
    out_dir: Path,
    result: GenerationResult,
    req: DrivingRequest,
    config_hash: str = "",
    dump_latents: bool = False,
) -> Dict[str, object]:
    """
    Write ``frame_00000.png`` ... plus ``frames.npy`` (exact float frames)
    and ``manifest.json``. Returns the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = result.video.frames
    for index, frame in enumerate(frames):
        pixels = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(out_dir / f"frame_{index:05d}.png")
    np.save(out_dir / "frames.npy", frames)

    if dump_latents:
        for index, latent in enumerate(result.latents):
            save_latent(out_dir / f"segment_{index:03d}.olc", latent)

    manifest = {
        "fps": result.video.fps,
        "num_frames": int(frames.shape[0]),
        "seed": req.seed,
        "mode": req.mode,
        "conditions": result.mask.active(),
        "segments": [list(s.generate) for s in result.plan.segments],
        "config_hash": config_hash,
        "video_hash": video_hash(result.video),
        "seam_coherence": seam_coherence(result.video, result.plan),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"✅ Wrote {frames.shape[0]} frames to {out_dir}")
    return manifest
