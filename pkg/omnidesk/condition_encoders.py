"""
Condition encoders

Turns raw driving signals into model-ready inputs:
- waveform -> multi-scale log filterbank rows -> windowed audio tokens,
  pooled per latent frame
- skeleton keypoints -> rasterized skeleton maps -> pose guider feature grid
- caption -> toy whitespace tokenizer ids (embedding lookup lives in the model)

The spectral extractor sits behind ``AudioFeatureExtractor`` so precomputed
speech-model features can be dropped in instead.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import librosa
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.signal import windows

from omnidesk.config import CodecConfig
from omnidesk.errors import DimensionMismatchError, EmptyInputError, KeypointRangeError, SampleRateError
from omnidesk.latent_codec import FPS, latent_group_bounds

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS
SCALES_MS = (10, 20, 40)
LOG_FLOOR = 1e-10

JOINT_NAMES = (
    "head", "neck",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
)
BONES = (
    (0, 1), (1, 2), (1, 3), (2, 4), (3, 5), (4, 6), (5, 7),
)
BONE_COLORS = np.array([
    [1.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
])
JOINT_COLOR = np.array([1.0, 1.0, 1.0])

PAD_ID, UNK_ID, NULL_ID = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<null>")


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------

class AudioFeatureExtractor(Protocol):
    feature_dim: int

    def __call__(self, wave: np.ndarray, num_frames: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray: ...


@lru_cache(maxsize=None)
def mel_filterbank(n_fft: int, bands: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """HTK triangular mel filters over the ``n_fft // 2 + 1`` rfft bins -> [bands, bins]."""
    fb = librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=bands, fmin=0.0, fmax=sample_rate / 2,
        htk=True, norm=None, dtype=np.float64,
    )
    fb.setflags(write=False)
    return fb


def _frame_centers(num_frames: int) -> np.ndarray:
    return np.arange(num_frames) * SAMPLES_PER_FRAME + SAMPLES_PER_FRAME // 2


def extract_audio_features(
    wave: np.ndarray,
    num_frames: int,
    sample_rate: int = SAMPLE_RATE,
    bands: int = 16,
) -> np.ndarray:
    """
    Multi-scale log filterbank features, one row per 25 fps pixel frame.

    Args:
        wave: mono waveform at 16 kHz
        num_frames: T, number of pixel frames
        sample_rate: must be 16000
        bands: filters per analysis scale

    Returns:
        [T, 3 * bands] float64; row t concatenates the 10/20/40 ms scales
        centered on frame t. Silence maps to log(1e-10).
    """
    if sample_rate != SAMPLE_RATE:
        raise SampleRateError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    wave = np.asarray(wave, dtype=np.float64).reshape(-1)
    if wave.size == 0:
        raise EmptyInputError("waveform is empty")
    if num_frames < 1:
        raise EmptyInputError("need at least one frame")

    longest = SAMPLE_RATE * max(SCALES_MS) // 1000
    needed = num_frames * SAMPLES_PER_FRAME
    padded = np.zeros(needed + 2 * longest)
    usable = min(wave.size, needed)
    padded[longest: longest + usable] = wave[:usable]
    centers = _frame_centers(num_frames) + longest

    rows = []
    for ms in SCALES_MS:
        length = SAMPLE_RATE * ms // 1000
        offsets = np.arange(length) - length // 2
        segments = padded[centers[:, None] + offsets[None, :]]
        spectrum = np.fft.rfft(segments * windows.hann(length, sym=False), axis=1)
        power = np.abs(spectrum) ** 2
        energy = power @ mel_filterbank(length, bands).T
        rows.append(np.log(np.maximum(energy, LOG_FLOOR)))
    return np.concatenate(rows, axis=1)


class SpectralFeatureExtractor:
    """Default ``AudioFeatureExtractor``."""

    def __init__(self, bands: int = 16):
        self.bands = bands
        self.feature_dim = bands * len(SCALES_MS)

    def __call__(self, wave: np.ndarray, num_frames: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        return extract_audio_features(wave, num_frames, sample_rate, self.bands)


class AudioProjector(nn.Module):
    """MLP compressing feature rows to the model hidden size."""

    def __init__(self, feature_dim: int, hidden_size: int, depth: int = 2):
        super().__init__()
        layers: List[nn.Module] = [nn.LayerNorm(feature_dim), nn.Linear(feature_dim, hidden_size)]
        for _ in range(depth - 1):
            layers += [nn.SiLU(), nn.Linear(hidden_size, hidden_size)]
        self.net = nn.Sequential(*layers)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.net(feats)


def assemble_audio_tokens(feats: torch.Tensor, window: int, proj: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """
    Stack each frame's projected features with its neighbours.

    Args:
        feats: [T, F] feature rows
        window: radius w; edge frames replicate the nearest real frame
        proj: learned map F -> D

    Returns:
        [T, 2w+1, D] tokens; token (t, j) = proj(feats[clamp(t + j - w)])
    """
    if feats.ndim != 2:
        raise DimensionMismatchError(f"expected [T, F] features, got {tuple(feats.shape)}")
    if window < 0:
        raise DimensionMismatchError("window radius must be >= 0")
    projected = proj(feats)
    num_frames = feats.shape[0]
    offsets = torch.arange(-window, window + 1, device=feats.device)
    index = (torch.arange(num_frames, device=feats.device)[:, None] + offsets[None, :]).clamp(0, num_frames - 1)
    return projected[index]


def pool_audio_per_latent_frame(
    tokens: torch.Tensor,
    codec: CodecConfig,
    latent_frames: Optional[int] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Group per-pixel-frame token sets by the codec's causal temporal grouping.

    Args:
        tokens: [T, k, D] audio tokens
        codec: supplies the temporal group size gt
        latent_frames: expected Tlat of the paired latent, checked when given

    Returns:
        (sets, mask): sets is [Tlat, gt*k, D] zero-padded; mask marks real tokens
        (k for latent frame 0, up to gt*k afterwards).
    """
    num_frames, k, dim = tokens.shape
    bounds = latent_group_bounds(num_frames, codec.gt)
    if latent_frames is not None and len(bounds) != latent_frames:
        raise DimensionMismatchError(
            f"{num_frames} audio frames give {len(bounds)} latent frames, latent has {latent_frames}"
        )
    sets = tokens.new_zeros((len(bounds), codec.gt * k, dim))
    mask = torch.zeros((len(bounds), codec.gt * k), dtype=torch.bool, device=tokens.device)
    for f, (start, stop) in enumerate(bounds):
        n = (stop - start) * k
        sets[f, :n] = tokens[start:stop].reshape(n, dim)
        mask[f, :n] = True
    return sets, mask


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass
class SkeletonSequence:
    """Per-frame 2D keypoints in [0, 1]^2 with visibility flags."""

    keypoints: np.ndarray  # [T, J, 2] (x, y)
    visible: np.ndarray  # [T, J] bool

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.keypoints.ndim != 3 or self.keypoints.shape[1:] != (len(JOINT_NAMES), 2):
            raise DimensionMismatchError(f"expected [T, {len(JOINT_NAMES)}, 2] keypoints, got {self.keypoints.shape}")
        if self.visible.shape != self.keypoints.shape[:2]:
            raise DimensionMismatchError("visibility flags do not match keypoints")

    @property
    def num_frames(self) -> int:
        return self.keypoints.shape[0]

    def slice(self, start: int, stop: int) -> "SkeletonSequence":
        return SkeletonSequence(self.keypoints[start:stop], self.visible[start:stop])

    def mirrored(self) -> "SkeletonSequence":
        flipped = self.keypoints.copy()
        flipped[..., 0] = 1.0 - flipped[..., 0]
        return SkeletonSequence(flipped, self.visible.copy())


def save_skeleton(path: Path, skeleton: SkeletonSequence) -> None:
    with open(path, "w") as f:
        for t in range(skeleton.num_frames):
            joints = {
                name: {
                    "x": float(skeleton.keypoints[t, j, 0]),
                    "y": float(skeleton.keypoints[t, j, 1]),
                    "visible": bool(skeleton.visible[t, j]),
                }
                for j, name in enumerate(JOINT_NAMES)
            }
            f.write(json.dumps({"frame": t, "joints": joints}) + "\n")


def load_skeleton(path: Path) -> SkeletonSequence:
    keypoints, visible = [], []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            joints = json.loads(line)["joints"]
            keypoints.append([[joints[n]["x"], joints[n]["y"]] for n in JOINT_NAMES])
            visible.append([joints[n]["visible"] for n in JOINT_NAMES])
    return SkeletonSequence(np.array(keypoints), np.array(visible))


def _pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return xs, ys


def disc_coverage(xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, radius: float) -> np.ndarray:
    """Anti-aliased disc, nonzero only strictly inside ``radius``."""
    return np.clip(radius - np.hypot(xs - cx, ys - cy), 0.0, 1.0)


def segment_coverage(xs: np.ndarray, ys: np.ndarray, p0: np.ndarray, p1: np.ndarray, half_width: float) -> np.ndarray:
    """Anti-aliased segment of the given half width (pixel units)."""
    d = p1 - p0
    length_sq = float(d @ d)
    if length_sq == 0.0:
        return disc_coverage(xs, ys, p0[0], p0[1], half_width)
    u = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / length_sq, 0.0, 1.0)
    dist = np.hypot(xs - (p0[0] + u * d[0]), ys - (p0[1] + u * d[1]))
    return np.clip(half_width - dist, 0.0, 1.0)


def rasterize_skeleton(
    skeleton: SkeletonSequence,
    height: int,
    width: int,
    thickness: float = 1.0,
    joint_radius: float = 1.0,
) -> np.ndarray:
    """
    Render skeleton maps: fixed per-bone colors, anti-aliased, max-composited.

    Bones with an invisible endpoint and invisible joints are omitted.

    Returns:
        [T, H, W, 3] float32, zero background
    """
    kp = skeleton.keypoints
    if not np.all(np.isfinite(kp)) or np.any(kp < 0.0) or np.any(kp > 1.0):
        raise KeypointRangeError("keypoints must lie in [0, 1]^2")

    xs, ys = _pixel_grid(height, width)
    scale = np.array([width, height], dtype=np.float64)
    maps = np.zeros((skeleton.num_frames, height, width, 3))
    for t in range(skeleton.num_frames):
        pts = kp[t] * scale
        vis = skeleton.visible[t]
        canvas = maps[t]
        for (a, b), color in zip(BONES, BONE_COLORS):
            if vis[a] and vis[b]:
                cov = segment_coverage(xs, ys, pts[a], pts[b], thickness)
                np.maximum(canvas, cov[..., None] * color, out=canvas)
        for j in np.flatnonzero(vis):
            cov = disc_coverage(xs, ys, pts[j, 0], pts[j, 1], joint_radius)
            np.maximum(canvas, cov[..., None] * JOINT_COLOR, out=canvas)
    return maps.astype(np.float32)


class PoseGuider(nn.Module):
    """Three conv stages (stride sp in the middle); the last layer starts at zero."""

    def __init__(self, sp: int, channels: Tuple[int, int] = (16, 32), out_channels: int = 8):
        super().__init__()
        self.sp = sp
        c1, c2 = channels
        self.conv_in = nn.Conv2d(3, c1, kernel_size=3, stride=1, padding=1)
        self.conv_down = nn.Conv2d(c1, c2, kernel_size=3, stride=sp, padding=1)
        self.conv_out = nn.Conv2d(c2, out_channels, kernel_size=3, stride=1, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.conv_in(maps))
        x = F.silu(self.conv_down(x))
        return self.conv_out(x)

    def receptive_field(self, index: int) -> Tuple[int, int]:
        """Inclusive input-pixel range along one axis that output cell ``index`` reads."""
        return (index - 1) * self.sp - 2, (index + 1) * self.sp + 2


def encode_pose_features(
    maps: torch.Tensor,
    codec: CodecConfig,
    guider: PoseGuider,
    latent_shape: Optional[Tuple[int, ...]] = None,
) -> torch.Tensor:
    """
    Encode skeleton maps into a grid pixel-aligned with the video latent.

    Args:
        maps: [T, H, W, 3] skeleton maps
        codec: grouping and spatial patch size
        guider: learned encoder downsampling by sp
        latent_shape: paired VideoLatent shape, checked when given

    Returns:
        [Tlat, Hlat, Wlat, gt * Cp]; each latent frame channel-concatenates the
        encodings of its pixel frames (frame 0 group zero-padded).
    """
    num_frames, height, width, _ = maps.shape
    if height % codec.sp or width % codec.sp:
        raise DimensionMismatchError(f"skeleton maps {height}x{width} not divisible by sp={codec.sp}")
    if latent_shape is not None and (height // codec.sp, width // codec.sp) != tuple(latent_shape[1:3]):
        raise DimensionMismatchError(f"skeleton maps {height}x{width} do not match latent {tuple(latent_shape)}")

    feats = guider(maps.permute(0, 3, 1, 2))  # [T, Cp, Hl, Wl]
    bounds = latent_group_bounds(num_frames, codec.gt)
    if latent_shape is not None and len(bounds) != latent_shape[0]:
        raise DimensionMismatchError(f"{num_frames} pose frames give {len(bounds)} latent frames, latent has {latent_shape[0]}")
    groups = []
    for start, stop in bounds:
        slots = list(feats[start:stop])
        slots += [torch.zeros_like(feats[0])] * (codec.gt - len(slots))
        groups.append(torch.cat(slots, dim=0))
    return torch.stack(groups).permute(0, 2, 3, 1)


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------

@dataclass
class TextTokens:
    ids: torch.Tensor  # [Lmax] int64

    @property
    def is_null(self) -> bool:
        return int(self.ids[0]) == NULL_ID


def tokenize(caption: str) -> List[str]:
    return caption.lower().split()


class Vocabulary:
    """Whitespace/lowercase vocabulary with PAD, UNK and NULL reserved."""

    def __init__(self, words: Sequence[str]):
        self.itos: List[str] = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def build(cls, captions: Iterable[str], size: int = 1024) -> "Vocabulary":
        counts = Counter(word for caption in captions for word in tokenize(caption))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked[: size - len(SPECIAL_TOKENS)])

    def save(self, path: Path) -> None:
        with open(path, "w") as f:
            json.dump(self.itos[len(SPECIAL_TOKENS):], f)

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        with open(path) as f:
            return cls(json.load(f))

    def lookup(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)


def encode_text(caption: Optional[str], vocab: Vocabulary, text_len: int = 32) -> TextTokens:
    """Caption -> ids padded/truncated to ``text_len``. ``None`` gives the NULL caption."""
    if caption is None:
        return null_text(text_len)
    ids = [vocab.lookup(w) for w in tokenize(caption)][:text_len]
    ids += [PAD_ID] * (text_len - len(ids))
    return TextTokens(ids=torch.tensor(ids, dtype=torch.long))


def null_text(text_len: int = 32) -> TextTokens:
    """The dropped-text condition: NULL followed by padding."""
    ids = [NULL_ID] + [PAD_ID] * (text_len - 1)
    return TextTokens(ids=torch.tensor(ids, dtype=torch.long))
