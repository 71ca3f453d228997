"""
Omni-conditions training

Routes clips to the tasks their quality flags allow, drops conditions by
per-stage keep ratios, and runs the three-stage schedule with AdamW.

Key components:
- ClipRecord / manifest IO: the JSON-lines dataset index shared with synth_eval
- route_clip + sample_condition_mask: which conditions a training sample sees
- build_batch: clip -> (ConditionBundle, NoiseState) items, deterministic per step
- TrainState / train_step / run_stages: the optimization loop with checkpoints
- validation_loss: fixed-noise held-out loss for a forced task
"""

import json
import queue
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field
from scipy.io import wavfile
from tqdm import tqdm

from omnidesk.bundle import ConditionBundle, ConditionMask, denoise
from omnidesk.checkpoint import load_checkpoint, restore_model, restore_optimizer, save_checkpoint
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
from omnidesk.config import RunConfig, TrainPlan
from omnidesk.errors import ClipLoadError, ConfigError, EmptyInputError, NonFiniteError, OmniError, SampleRateError
from omnidesk.latent_codec import PixelVideo, encode_video, fit_norm_stats, with_norm_stats
from omnidesk.omnidit import NoiseState, OmniDiT, flow_pair, mse_loss

logger = logging.getLogger(__name__)

# Pixel frames of ground-truth context carried into a training sample
MOTION_PIXEL_FRAMES = 5
METRIC_COLUMNS = ["step", "stage", "loss", "text_rate", "audio_rate", "pose_rate"]
VALIDATION_T_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


# ---------------------------------------------------------------------------
# Dataset records
# ---------------------------------------------------------------------------

class ClipFlags(BaseModel):
    lipsync_ok: bool = Field(..., description="Audio and lips are in sync")
    pose_visible: bool = Field(..., description="Skeleton is reliably visible")
    aesthetic_ok: bool = Field(True, description="Passes the visual-quality filter")


class ClipRecord(BaseModel):
    """One line of manifest.jsonl. Paths are relative to the manifest directory."""

    id: str
    frames_path: str
    waveform_path: str
    skeleton_path: str
    caption: str = ""
    flags: ClipFlags


def write_manifest(path: Path, records: Sequence[ClipRecord]) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")


def read_manifest(path: Path) -> List[ClipRecord]:
    path = Path(path)
    if not path.exists():
        raise EmptyInputError(f"manifest not found: {path}")
    with open(path) as f:
        records = [ClipRecord.model_validate_json(line) for line in f if line.strip()]
    if not records:
        raise EmptyInputError(f"manifest {path} lists no clips")
    return records


@dataclass
class ClipData:
    record: ClipRecord
    video: PixelVideo
    wave: np.ndarray  # float64 in [-1, 1]
    skeleton: SkeletonSequence


def load_clip(record: ClipRecord, root: Path) -> ClipData:
    """Read one clip's frames, waveform and skeleton; failures carry the clip id."""
    root = Path(root)
    try:
        frames = np.load(root / record.frames_path)
        rate, pcm = wavfile.read(root / record.waveform_path)
        skeleton = load_skeleton(root / record.skeleton_path)
    except (OSError, ValueError) as e:
        raise ClipLoadError(record.id, str(e))
    if rate != SAMPLE_RATE:
        raise SampleRateError(f"clip {record.id} is sampled at {rate} Hz, expected {SAMPLE_RATE}", clip_id=record.id)
    wave = pcm.astype(np.float64) / 32768.0 if pcm.dtype == np.int16 else pcm.astype(np.float64)
    try:
        video = PixelVideo(frames=frames)
    except OmniError as e:
        raise ClipLoadError(record.id, e.message)
    if skeleton.num_frames != video.num_frames:
        raise ClipLoadError(record.id, f"skeleton has {skeleton.num_frames} frames, video has {video.num_frames}")
    return ClipData(record=record, video=video, wave=wave, skeleton=skeleton)


class ClipStore:
    """Loads clips lazily and caches the derived per-frame signals."""

    def __init__(self, root: Path, audio_bands: int = 16):
        self.root = Path(root)
        self.extractor = SpectralFeatureExtractor(audio_bands)
        self._clips: Dict[str, ClipData] = {}
        self._audio: Dict[str, np.ndarray] = {}
        self._pose: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def add(self, clip: ClipData) -> None:
        """Register an in-memory clip (synthetic data that never touched disk)."""
        with self._lock:
            self._clips[clip.record.id] = clip

    def clip(self, record: ClipRecord) -> ClipData:
        with self._lock:
            cached = self._clips.get(record.id)
        if cached is None:
            cached = load_clip(record, self.root)
            with self._lock:
                self._clips[record.id] = cached
        return cached

    def audio_features(self, record: ClipRecord) -> np.ndarray:
        if record.id not in self._audio:
            clip = self.clip(record)
            self._audio[record.id] = self.extractor(clip.wave, clip.video.num_frames)
        return self._audio[record.id]

    def pose_maps(self, record: ClipRecord) -> np.ndarray:
        if record.id not in self._pose:
            clip = self.clip(record)
            self._pose[record.id] = rasterize_skeleton(clip.skeleton, clip.video.height, clip.video.width)
        return self._pose[record.id]


# ---------------------------------------------------------------------------
# Routing and condition dropping
# ---------------------------------------------------------------------------

def route_clip(record: ClipRecord) -> FrozenSet[str]:
    """Conditions a clip may train. Text is always eligible, so no clip is discarded."""
    eligible = {"text"}
    if record.flags.lipsync_ok:
        eligible.add("audio")
    if record.flags.pose_visible:
        eligible.add("pose")
    return frozenset(eligible)


def sample_condition_mask(eligible: FrozenSet[str], plan: TrainPlan, rng: np.random.Generator) -> ConditionMask:
    """
    Independent Bernoulli keep per condition.

    Four uniforms are drawn for every sample regardless of eligibility so the
    random stream does not depend on the clip's flags.
    """
    ratios = plan.keep_ratios()
    u = rng.random(4)
    keep = {
        name: bool(name in eligible and u[i] < ratios[name])
        for i, name in enumerate(("text", "audio", "pose"))
    }
    return ConditionMask(motion_frames=bool(u[3] < plan.motion_prob), **keep)


def step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    """Generator for one optimizer step, independent of how many steps ran before."""
    return np.random.default_rng(np.random.SeedSequence([seed, stage, step]))


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class TrainItem:
    clip_id: str
    bundle: ConditionBundle
    noise: NoiseState
    loss_mask: Optional[torch.Tensor] = None


@dataclass
class TrainingData:
    records: List[ClipRecord]
    store: ClipStore
    vocab: Vocabulary


def make_bundle(
    data: TrainingData,
    record: ClipRecord,
    mask: ConditionMask,
    cfg: RunConfig,
    reference_index: int,
    start: int = 0,
) -> Tuple[ConditionBundle, np.ndarray]:
    """
    Conditions for generating frames ``[start, T)`` of a clip.

    Returns:
        (bundle, target pixel frames)
    """
    clip = data.store.clip(record)
    frames = clip.video.frames
    reference = encode_video(PixelVideo(frames[reference_index:reference_index + 1]), cfg.codec)
    motion = None
    if start > 0:
        motion = torch.from_numpy(encode_video(PixelVideo(frames[:start]), cfg.codec).grid).float()

    text_len = cfg.model.text_len
    text = encode_text(record.caption or None, data.vocab, text_len) if mask.text else null_text(text_len)
    audio = torch.from_numpy(data.store.audio_features(record)[start:]).float() if mask.audio else None
    pose = torch.from_numpy(data.store.pose_maps(record)[start:]).float() if mask.pose else None
    bundle = ConditionBundle(
        text=text,
        reference=torch.from_numpy(reference.grid).float(),
        motion=motion,
        audio_feats=audio,
        pose_maps=pose,
        mask=mask,
    )
    return bundle, frames[start:]


def build_batch(data: TrainingData, plan: TrainPlan, rng: np.random.Generator, cfg: RunConfig) -> List[TrainItem]:
    """
    Draw ``plan.batch_size`` training items.

    Per item: a clip drawn uniformly, a condition mask, a uniformly random
    reference frame from the same clip, an optional ground-truth motion
    prefix, t ~ U[0, 1] and standard normal noise. Only the frames after the
    prefix are noised, so the loss covers the continuation alone.
    """
    if not data.records:
        raise EmptyInputError("training data lists no clips")

    items = []
    for index in rng.integers(len(data.records), size=plan.batch_size):
        record = data.records[int(index)]
        mask = sample_condition_mask(route_clip(record), plan, rng)
        num_frames = data.store.clip(record).video.num_frames
        reference_index = int(rng.integers(num_frames))
        start = MOTION_PIXEL_FRAMES if mask.motion_frames and num_frames > MOTION_PIXEL_FRAMES else 0
        bundle, target = make_bundle(data, record, mask, cfg, reference_index, start)

        x0 = encode_video(PixelVideo(target), cfg.codec).grid
        t = float(rng.random())
        noise = rng.standard_normal(x0.shape)
        state = flow_pair(torch.from_numpy(x0).float(), torch.from_numpy(noise).float(), t)
        items.append(TrainItem(clip_id=record.id, bundle=bundle, noise=state))
    return items


class BatchPrefetcher:
    """
    Builds batches on a background thread and hands them over through a
    bounded queue. One producer works through the steps in order, so the
    consumer sees exactly the sequence a synchronous loop would.

    Use it as a context manager: leaving the block, normally or through an
    exception, stops the producer and joins its thread.
    """

    _DONE = object()
    _POLL = 0.05

    def __init__(self, make_batch, steps: Sequence[int], depth: int = 2):
        self._make_batch = make_batch
        self._steps = list(steps)
        self._queue: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, daemon=True)

    def _put(self, item: Any) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=self._POLL)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for step in self._steps:
                if not self._put((step, self._make_batch(step))):
                    return
        except BaseException as e:
            self._put(e)
            return
        self._put(self._DONE)

    @property
    def running(self) -> bool:
        return self._thread.is_alive()

    def close(self, timeout: Optional[float] = None) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout)

    def __enter__(self) -> "BatchPrefetcher":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __iter__(self) -> Iterator[Tuple[int, List[TrainItem]]]:
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            self._stop.set()


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: OmniDiT
    optimizer: torch.optim.Optimizer
    seed: int = 0
    step: int = 0
    stage_index: int = 0
    stage_step: int = 0
    loss_history: Deque[float] = field(default_factory=lambda: deque(maxlen=1000))

    def run_state(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "step": self.step,
            "stage_index": self.stage_index,
            "stage_step": self.stage_step,
            "loss_history": list(self.loss_history),
        }


def make_optimizer(model: OmniDiT, plan: TrainPlan) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=plan.lr, betas=tuple(plan.betas), weight_decay=plan.weight_decay)


def apply_plan(optimizer: torch.optim.Optimizer, plan: TrainPlan) -> None:
    """Switch optimizer hyperparameters to a stage's plan, keeping the moments."""
    for group in optimizer.param_groups:
        group["lr"] = plan.lr
        group["betas"] = tuple(plan.betas)
        group["weight_decay"] = plan.weight_decay


def create_train_state(cfg: RunConfig, audio_feature_dim: Optional[int] = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = OmniDiT(cfg.model, cfg.codec, audio_feature_dim)
    return TrainState(model=model, optimizer=make_optimizer(model, cfg.plans[0]), seed=cfg.seed)


def item_loss(model: OmniDiT, item: TrainItem) -> torch.Tensor:
    pred = denoise(model, item.bundle, item.noise.x_t, item.noise.t)
    return mse_loss(pred, item.noise.target_v, item.loss_mask)


def _dump_diagnostics(path: Optional[Path], state: TrainState, batch: List[TrainItem], losses: List[float]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "step": state.step,
        "stage_index": state.stage_index,
        "items": [
            {"clip_id": item.clip_id, "t": item.noise.t, "mask": item.bundle.mask.active(), "loss": loss}
            for item, loss in zip(batch, losses)
        ],
        "recent_losses": list(state.loss_history)[-20:],
    }
    with open(path, "w") as f:
        json.dump(record, f, indent=2)
    logger.error(f"Wrote non-finite diagnostics to {path}")


def train_step(
    state: TrainState,
    batch: List[TrainItem],
    grad_clip: float = 1.0,
    diagnostics_path: Optional[Path] = None,
) -> Tuple[TrainState, float]:
    """
    One optimizer step over ``batch``.

    Items are forwarded one at a time in batch order and their gradients
    accumulated (each scaled by 1/B), then the global gradient norm is
    clipped to ``grad_clip`` and AdamW is applied.

    Raises:
        NonFiniteError: if any item's loss is not finite; parameters are left untouched
    """
    model, optimizer = state.model, state.optimizer
    model.train()
    optimizer.zero_grad(set_to_none=True)

    losses = []
    for item in batch:
        loss = item_loss(model, item) / len(batch)
        value = float(loss.item()) * len(batch)
        losses.append(value)
        if not np.isfinite(value):
            optimizer.zero_grad(set_to_none=True)
            _dump_diagnostics(diagnostics_path, state, batch, losses)
            raise NonFiniteError(f"non-finite loss at step {state.step} (clip {item.clip_id})", step=state.step)
        loss.backward()

    torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()

    mean_loss = float(np.mean(losses)) if losses else 0.0
    state.step += 1
    state.stage_step += 1
    state.loss_history.append(mean_loss)
    return state, mean_loss


# ---------------------------------------------------------------------------
# Stage loop
# ---------------------------------------------------------------------------

def checkpoint_path(out_dir: Path, stage: int, step_in_stage: Optional[int] = None) -> Path:
    if step_in_stage is None:
        return Path(out_dir) / f"stage{stage}.ohck"
    return Path(out_dir) / f"stage{stage}_step{step_in_stage}.ohck"


def resume_train_state(path: Path, cfg: RunConfig) -> TrainState:
    """Rebuild a TrainState from a checkpoint written by ``run_stages``."""
    ckpt = load_checkpoint(path)
    model = restore_model(ckpt, cfg.model_hash())
    run_state = ckpt.run_state
    stage_index = int(run_state.get("stage_index", 0))
    plan = cfg.plans[min(stage_index, len(cfg.plans) - 1)]
    optimizer = make_optimizer(model, plan)
    restore_optimizer(ckpt, model, optimizer)
    state = TrainState(
        model=model,
        optimizer=optimizer,
        seed=int(run_state.get("seed", cfg.seed)),
        step=int(run_state.get("step", 0)),
        stage_index=stage_index,
        stage_step=int(run_state.get("stage_step", 0)),
    )
    state.loss_history.extend(run_state.get("loss_history", []))
    logger.info(f"Resumed from {path} at stage {stage_index + 1}, step {state.stage_step} (global {state.step})")
    return state


def _save(state: TrainState, path: Path, cfg: RunConfig, metrics: List[Dict[str, Any]], metrics_path: Path) -> None:
    save_checkpoint(path, state.model, state.optimizer, state.run_state(), cfg.model_hash())
    pd.DataFrame(metrics, columns=METRIC_COLUMNS).to_csv(metrics_path, index=False)


def _load_metrics(metrics_path: Path, resume_step: int) -> List[Dict[str, Any]]:
    if resume_step == 0 or not metrics_path.exists():
        return []
    frame = pd.read_csv(metrics_path)
    return frame[frame["step"] < resume_step].to_dict("records")


def run_stages(
    state: TrainState,
    cfg: RunConfig,
    data: TrainingData,
    out_dir: Path,
    prefetch: int = 2,
    progress: bool = True,
) -> Tuple[TrainState, List[Dict[str, Any]]]:
    """
    Run every remaining stage of ``cfg.plans`` in order.

    Writes ``stage<n>.ohck`` at each stage boundary (plus mid-stage
    checkpoints every ``cfg.checkpoint_every`` steps), ``metrics.csv`` with
    one row per step and ``exposure.csv`` with one row per stage.

    Returns:
        (final state, per-stage metrics)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    diagnostics_path = out_dir / "nonfinite.json"
    metrics = _load_metrics(metrics_path, state.step)
    stage_metrics: List[Dict[str, Any]] = []

    for index, plan in enumerate(cfg.plans):
        if index < state.stage_index:
            continue
        if index > state.stage_index:
            state.stage_index, state.stage_step = index, 0
        apply_plan(state.optimizer, plan)
        logger.info(
            f"Stage {plan.stage}: training {plan.active_conditions} for {plan.steps} steps "
            f"(keep ratios {plan.keep_ratios()})"
        )

        exposure = {"text": 0, "audio": 0, "pose": 0}
        seen = 0
        stage_losses = []
        steps = range(state.stage_step, plan.steps)
        bar = tqdm(total=len(steps), desc=f"stage {plan.stage}", disable=not progress)
        with BatchPrefetcher(
            lambda step, plan=plan: build_batch(data, plan, step_rng(state.seed, plan.stage, step), cfg),
            steps,
            depth=prefetch,
        ) as batches:
            for step, batch in batches:
                state, loss = train_step(state, batch, plan.grad_clip, diagnostics_path)
                rates = {name: np.mean([getattr(item.bundle.mask, name) for item in batch]) for name in exposure}
                for name in exposure:
                    exposure[name] += sum(getattr(item.bundle.mask, name) for item in batch)
                seen += len(batch)
                stage_losses.append(loss)
                metrics.append({
                    "step": state.step - 1,
                    "stage": plan.stage,
                    "loss": loss,
                    "text_rate": float(rates["text"]),
                    "audio_rate": float(rates["audio"]),
                    "pose_rate": float(rates["pose"]),
                })
                bar.update(1)
                if state.stage_step % cfg.log_every == 0:
                    logger.info(f"stage {plan.stage} step {state.stage_step}/{plan.steps} loss {loss:.5f}")
                if cfg.checkpoint_every and state.stage_step % cfg.checkpoint_every == 0 and state.stage_step < plan.steps:
                    _save(state, checkpoint_path(out_dir, plan.stage, state.stage_step), cfg, metrics, metrics_path)
        bar.close()

        summary = {
            "stage": plan.stage,
            "steps": len(stage_losses),
            "mean_loss": float(np.mean(stage_losses)) if stage_losses else float("nan"),
            **{f"{name}_rate": (exposure[name] / seen if seen else 0.0) for name in exposure},
        }
        stage_metrics.append(summary)
        logger.info(
            f"✅ Stage {plan.stage} done: exposure T={summary['text_rate']:.3f} "
            f"A={summary['audio_rate']:.3f} P={summary['pose_rate']:.3f}, mean loss {summary['mean_loss']:.5f}"
        )

        state.stage_index, state.stage_step = index + 1, 0
        _save(state, checkpoint_path(out_dir, plan.stage), cfg, metrics, metrics_path)

    pd.DataFrame(stage_metrics).to_csv(out_dir / "exposure.csv", index=False)
    return state, stage_metrics


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

VALIDATION_TASKS = {
    "audio": ConditionMask(text=True, audio=True),
    "pose": ConditionMask(text=True, pose=True),
    "text": ConditionMask(text=True),
}


def validation_loss(
    model: OmniDiT,
    data: TrainingData,
    cfg: RunConfig,
    task: str = "audio",
    seed: int = 0,
    t_grid: Sequence[float] = VALIDATION_T_GRID,
) -> float:
    """
    Held-out flow-matching loss with the task's conditions forced on.

    Reference frame 0, no motion prefix, and noise fixed by (seed, clip
    position), so the value depends on the weights alone.
    """
    if not data.records:
        raise EmptyInputError("validation set is empty")
    mask = VALIDATION_TASKS[task]
    model.eval()
    losses = []
    with torch.no_grad():
        for position, record in enumerate(data.records):
            bundle, target = make_bundle(data, record, mask, cfg, reference_index=0)
            x0 = torch.from_numpy(encode_video(PixelVideo(target), cfg.codec).grid).float()
            rng = np.random.default_rng(np.random.SeedSequence([seed, position]))
            noise = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).float()
            for t in t_grid:
                state = flow_pair(x0, noise, t)
                pred = denoise(model, bundle, state.x_t, t)
                losses.append(float(mse_loss(pred, state.target_v)))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Entry helpers
# ---------------------------------------------------------------------------

NORM_FIT_CLIPS = 256


def load_training_data(
    cfg: RunConfig,
    manifest: str = "manifest.jsonl",
    limit: Optional[int] = None,
) -> Tuple[TrainingData, RunConfig]:
    """
    Open a dataset directory and make sure ``cfg.codec`` carries
    normalization statistics, fitting them on up to 256 clips if absent.

    Returns:
        (training data, config with fitted codec stats)
    """
    root = Path(cfg.paths.data_dir)
    records = read_manifest(root / manifest)
    if limit is not None:
        records = records[:limit]
    vocab = Vocabulary.load(root / "vocab.json")
    if len(vocab) > cfg.model.vocab_size:
        raise ConfigError(
            f"dataset vocabulary has {len(vocab)} words, model.vocab_size is {cfg.model.vocab_size}"
        )
    store = ClipStore(root, cfg.model.audio_mel_bands)

    if cfg.codec.mean is None or cfg.codec.std is None:
        videos = [store.clip(record).video for record in records[:NORM_FIT_CLIPS]]
        mean, std = fit_norm_stats(videos, cfg.codec)
        cfg = cfg.model_copy(update={"codec": with_norm_stats(cfg.codec, mean, std)})
        logger.info(f"Fitted codec statistics on {len(videos)} clips (stats {cfg.codec.stats_id})")
    return TrainingData(records=records, store=store, vocab=vocab), cfg
