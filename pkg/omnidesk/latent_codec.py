"""
Latent codec

Exactly invertible stand-in for a causal 3D video VAE. Pixel videos are grouped
causally in time (frame 0 alone, then groups of ``gt`` frames), packed into
``sp x sp`` spatial patches, and normalized per channel.

The codec sits behind the ``VideoCodec`` protocol so a learned VAE can replace
``PatchCodec`` without touching callers.
"""

import math
import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from einops import rearrange

from omnidesk.config import CodecConfig
from omnidesk.errors import DimensionMismatchError, EmptyInputError, NonFiniteError, StatsMismatchError, ValueRangeError

logger = logging.getLogger(__name__)

FPS = 25
LATENT_MAGIC = b"OLC1"
STD_FLOOR = 1e-6
ZERO_SNAP = 2.0 ** -50


@dataclass
class PixelVideo:
    """T frames of [H, W, 3] float32 RGB in [0, 1]."""

    frames: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.shape[0] < 1:
            raise DimensionMismatchError(f"expected [T, H, W, 3] frames, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise NonFiniteError("video contains non-finite values")
        low, high = float(self.frames.min()), float(self.frames.max())
        if low < 0.0 or high > 1.0:
            raise ValueRangeError(f"pixel values must lie in [0, 1], got [{low:.4g}, {high:.4g}]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class VideoLatent:
    """[Tlat, Hlat, Wlat, C] float64 grid plus the stats it was normalized with."""

    grid: np.ndarray
    stats_id: str
    num_frames: int

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.grid.shape)


class VideoCodec(Protocol):
    def encode(self, video: PixelVideo) -> VideoLatent: ...

    def decode(self, latent: VideoLatent, display: bool = False) -> PixelVideo: ...


def latent_frame_count(num_frames: int, gt: int) -> int:
    """Tlat = 1 + ceil((T - 1) / gt)."""
    if num_frames < 1:
        raise EmptyInputError("a video needs at least one frame")
    return 1 + math.ceil((num_frames - 1) / gt)


def latent_group_bounds(num_frames: int, gt: int) -> List[Tuple[int, int]]:
    """Pixel-frame range [start, stop) encoded by each latent frame."""
    bounds = [(0, 1)]
    for k in range(1, latent_frame_count(num_frames, gt)):
        start = 1 + (k - 1) * gt
        bounds.append((start, min(start + gt, num_frames)))
    return bounds


def _check_dims(height: int, width: int, cfg: CodecConfig) -> None:
    if height % cfg.sp or width % cfg.sp:
        raise DimensionMismatchError(
            f"frame size {height}x{width} is not divisible by spatial patch {cfg.sp}",
            height=height, width=width, sp=cfg.sp,
        )


def _group(frames: np.ndarray, gt: int) -> Tuple[np.ndarray, np.ndarray]:
    """[T, H, W, 3] -> zero-padded [Tlat, gt, H, W, 3] and a [Tlat, gt] validity mask."""
    bounds = latent_group_bounds(frames.shape[0], gt)
    grouped = np.zeros((len(bounds), gt) + frames.shape[1:], dtype=np.float64)
    valid = np.zeros((len(bounds), gt), dtype=bool)
    for k, (start, stop) in enumerate(bounds):
        grouped[k, : stop - start] = frames[start:stop]
        valid[k, : stop - start] = True
    return grouped, valid


def _pack(grouped: np.ndarray, sp: int) -> np.ndarray:
    return rearrange(grouped, "tl g (h p1) (w p2) c -> tl h w (g p1 p2 c)", p1=sp, p2=sp)


def _unpack(packed: np.ndarray, sp: int, gt: int) -> np.ndarray:
    return rearrange(packed, "tl h w (g p1 p2 c) -> tl g (h p1) (w p2) c", g=gt, p1=sp, p2=sp, c=3)


def encode_video(video: PixelVideo, cfg: CodecConfig) -> VideoLatent:
    """
    Encode a pixel video into a normalized causal latent.

    Args:
        video: frames in [0, 1]
        cfg: codec geometry and normalization

    Returns:
        VideoLatent with Tlat = 1 + ceil((T-1)/gt), Hlat = H/sp, Wlat = W/sp
    """
    frames = video.frames
    _check_dims(video.height, video.width, cfg)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteError("video contains non-finite values")

    grouped, _ = _group(frames, cfg.gt)
    packed = _pack(grouped, cfg.sp)
    mean, scale = cfg.norm_arrays()
    grid = (packed - mean) / scale
    return VideoLatent(grid=grid, stats_id=cfg.stats_id, num_frames=video.num_frames)


def decode_video(latent: VideoLatent, cfg: CodecConfig, display: bool = False) -> PixelVideo:
    """
    Invert ``encode_video``.

    Args:
        latent: a latent produced with the same codec config
        cfg: codec geometry and normalization
        display: clamp output to [0, 1] (generated latents can leave the range)

    Returns:
        PixelVideo with exactly ``latent.num_frames`` frames

    Raises:
        ValueRangeError: undisplayed output leaves [0, 1]
    """
    if latent.stats_id != cfg.stats_id:
        raise StatsMismatchError(
            f"latent stats {latent.stats_id} do not match codec stats {cfg.stats_id}",
        )
    if latent.grid.shape[-1] != cfg.channels:
        raise DimensionMismatchError(f"latent has {latent.grid.shape[-1]} channels, codec expects {cfg.channels}")

    mean, scale = cfg.norm_arrays()
    packed = latent.grid * scale + mean
    # the affine round trip leaves at most a few float64 ulps of |mean| where a pixel was 0
    packed = np.where(np.abs(packed) <= ZERO_SNAP * np.abs(mean), 0.0, packed)
    grouped = _unpack(packed, cfg.sp, cfg.gt)
    bounds = latent_group_bounds(latent.num_frames, cfg.gt)
    if len(bounds) != grouped.shape[0]:
        raise DimensionMismatchError(
            f"latent has {grouped.shape[0]} frames, {latent.num_frames} pixel frames need {len(bounds)}"
        )
    frames = np.concatenate([grouped[k, : stop - start] for k, (start, stop) in enumerate(bounds)], axis=0)
    frames = frames.astype(np.float32)
    if display:
        frames = np.clip(frames, 0.0, 1.0)
    return PixelVideo(frames=frames)


def fit_norm_stats(corpus: Sequence[PixelVideo], cfg: CodecConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-channel mean/std over every real (non-padding) packed latent entry.

    Two passes in float64; std is floored at 1e-6.
    """
    if len(corpus) == 0:
        raise EmptyInputError("cannot fit normalization statistics on an empty corpus")

    channels = cfg.channels
    packed_all, masks = [], []
    for video in corpus:
        _check_dims(video.height, video.width, cfg)
        grouped, valid = _group(video.frames, cfg.gt)
        packed = _pack(grouped, cfg.sp)
        # validity per (tl, channel): slot g of channel (g p1 p2 c) is valid when valid[tl, g]
        channel_valid = np.repeat(valid, cfg.sp * cfg.sp * 3, axis=1)
        packed_all.append(packed.reshape(packed.shape[0], -1, channels))
        masks.append(np.broadcast_to(channel_valid[:, None, :], (packed.shape[0], packed.shape[1] * packed.shape[2], channels)))

    total = np.zeros(channels)
    count = np.zeros(channels)
    for packed, mask in zip(packed_all, masks):
        total += np.where(mask, packed, 0.0).sum(axis=(0, 1))
        count += mask.sum(axis=(0, 1))
    # temporal slots no clip reaches (all clips shorter than gt + 1 frames) borrow
    # the statistics of the filled slots with the same (p1, p2, c)
    empty = count == 0
    per_slot = cfg.sp * cfg.sp * 3
    pooled_mean = np.tile(total.reshape(cfg.gt, per_slot).sum(0) / count.reshape(cfg.gt, per_slot).sum(0), cfg.gt)
    mean = np.where(empty, pooled_mean, total / np.where(empty, 1.0, count))

    sq = np.zeros(channels)
    pooled_sq = np.zeros(channels)
    for packed, mask in zip(packed_all, masks):
        sq += np.where(mask, (packed - mean) ** 2, 0.0).sum(axis=(0, 1))
        pooled_sq += np.where(mask, (packed - pooled_mean) ** 2, 0.0).sum(axis=(0, 1))
    pooled_var = np.tile(pooled_sq.reshape(cfg.gt, per_slot).sum(0) / count.reshape(cfg.gt, per_slot).sum(0), cfg.gt)
    var = np.where(empty, pooled_var, sq / np.where(empty, 1.0, count))
    return mean, np.maximum(np.sqrt(var), STD_FLOOR)


def with_norm_stats(cfg: CodecConfig, mean: np.ndarray, std: np.ndarray) -> CodecConfig:
    return cfg.model_copy(update={"mean": [float(m) for m in mean], "std": [float(s) for s in std]})


class PatchCodec:
    """``VideoCodec`` implementation backed by the packing functions above."""

    def __init__(self, cfg: CodecConfig):
        self.cfg = cfg

    def encode(self, video: PixelVideo) -> VideoLatent:
        return encode_video(video, self.cfg)

    def decode(self, latent: VideoLatent, display: bool = False) -> PixelVideo:
        return decode_video(latent, self.cfg, display=display)

    def latent_shape(self, num_frames: int, height: int, width: int) -> Tuple[int, int, int, int]:
        _check_dims(height, width, self.cfg)
        return (latent_frame_count(num_frames, self.cfg.gt), height // self.cfg.sp, width // self.cfg.sp, self.cfg.channels)


def save_latent(path: Path, latent: VideoLatent) -> None:
    """
    Write an OLC1 file: magic, dims, pixel-frame count, stats_id, then the grid as
    row-major little-endian float32.

    The file keeps float32 precision only: ``load_latent`` returns
    ``grid.astype(float32)`` widened back to float64, so decoding a loaded latent
    is not bit-exact. Keep the in-memory latent for exact round trips.
    """
    stats = latent.stats_id.encode()
    header = LATENT_MAGIC + struct.pack("<4II", *latent.grid.shape, latent.num_frames) + struct.pack("<H", len(stats)) + stats
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(latent.grid, dtype="<f4").tobytes())


def load_latent(path: Path) -> VideoLatent:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != LATENT_MAGIC:
        raise DimensionMismatchError(f"{path} is not an OLC1 latent file")
    offset = 4
    *dims, num_frames = struct.unpack_from("<4II", data, offset)
    offset += struct.calcsize("<4II")
    (stats_len,) = struct.unpack_from("<H", data, offset)
    offset += 2
    stats_id = data[offset: offset + stats_len].decode()
    offset += stats_len
    grid = np.frombuffer(data, dtype="<f4", offset=offset).reshape(dims).astype(np.float64)
    return VideoLatent(grid=grid, stats_id=stats_id, num_frames=num_frames)
