"""
OmniDiT denoiser

Dual-stream (text / visual) diffusion transformer with joint attention, 3-axis
RoPE, packed reference and motion-frame tokens, frame-wise audio
cross-attention, and pose features stacked channel-wise with the noisy latent.
Trained with rectified-flow velocity matching.

Key components:
- build_rope / apply_rope: (t, h, w) rotary phases; reference tokens get no
  temporal rotation, text tokens get none at all
- pack_tokens: [text | reference | motion | video] sequence layout
- OmniDiT: the denoiser; ``forward`` reads out velocity for video tokens only
- flow_pair / mse_loss: the training objective
"""

import math
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from omnidesk.config import CodecConfig, ModelConfig
from omnidesk.condition_encoders import (
    AudioProjector,
    PoseGuider,
    TextTokens,
    assemble_audio_tokens,
    encode_pose_features,
    pool_audio_per_latent_frame,
)
from omnidesk.errors import DimensionMismatchError, MaskEmptyError, NonFiniteError, TooManyMotionFramesError, ValueRangeError

logger = logging.getLogger(__name__)

KIND_TEXT, KIND_REFERENCE, KIND_MOTION, KIND_VIDEO = 0, 1, 2, 3
KIND_NAMES = {KIND_TEXT: "text", KIND_REFERENCE: "reference", KIND_MOTION: "motion", KIND_VIDEO: "video"}

Array = Union[np.ndarray, torch.Tensor]


# ---------------------------------------------------------------------------
# Rotary position embedding
# ---------------------------------------------------------------------------

def rope_axis_dim(head_dim: int) -> int:
    """Head dims rotated per axis; dims beyond 3 * this pass through unrotated."""
    return (head_dim // 6) * 2


def build_rope(positions: torch.Tensor, kinds: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """
    Rotation phases for every token and head-dim pair.

    Args:
        positions: [N, 3] integer (t, h, w)
        kinds: [N] token kinds
        cfg: supplies head_dim and rope_base

    Returns:
        [N, 3 * d_axis / 2] float64 phases ordered (t pairs, h pairs, w pairs);
        theta(p, i) = p * base^(-2i / d_axis). Reference tokens have zero
        temporal phase, text tokens zero phase everywhere.
    """
    d_axis = rope_axis_dim(cfg.head_dim)
    half = d_axis // 2
    inv_freq = cfg.rope_base ** (-2.0 * torch.arange(half, dtype=torch.float64) / d_axis)
    phases = positions.to(torch.float64)[:, :, None] * inv_freq  # [N, 3, half]
    phases[kinds == KIND_REFERENCE, 0, :] = 0.0
    phases[kinds == KIND_TEXT] = 0.0
    return phases.reshape(positions.shape[0], 3 * half)


def apply_rope(x: torch.Tensor, phases: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved pairs of the leading ``2 * P`` dims of ``x`` [..., N, head_dim]."""
    rotated = 2 * phases.shape[-1]
    x_rot, x_pass = x[..., :rotated], x[..., rotated:]
    x1, x2 = x_rot[..., 0::2], x_rot[..., 1::2]
    cos, sin = phases.cos().to(x.dtype), phases.sin().to(x.dtype)
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)
    return torch.cat((out, x_pass), dim=-1)


# ---------------------------------------------------------------------------
# Token packing
# ---------------------------------------------------------------------------

@dataclass
class PackedSequence:
    """
    Layout of one denoiser input. Text ids and visual latent rows are kept
    separately; the model embeds them into [N, D] tokens.
    """

    text_ids: torch.Tensor  # [Lmax]
    visual: torch.Tensor  # [Nref + Nmotion + Nvideo, C]
    kinds: torch.Tensor  # [N]
    positions: torch.Tensor  # [N, 3]
    frame_of: torch.Tensor  # [N], latent frame for video tokens, -1 otherwise
    video_shape: Tuple[int, int, int]  # (Tlat, Hlat, Wlat)
    num_text: int
    num_reference: int
    num_motion: int

    @property
    def num_video(self) -> int:
        tl, h, w = self.video_shape
        return tl * h * w

    @property
    def num_tokens(self) -> int:
        return self.num_text + self.num_reference + self.num_motion + self.num_video

    @property
    def motion_frames(self) -> int:
        _, h, w = self.video_shape
        return self.num_motion // (h * w)

    def with_noisy(self, z_noisy: torch.Tensor) -> "PackedSequence":
        """Same layout with the video rows replaced (used by the sampler each step)."""
        keep = self.num_reference + self.num_motion
        visual = torch.cat([self.visual[:keep], z_noisy.reshape(-1, z_noisy.shape[-1]).to(self.visual.dtype)], dim=0)
        return PackedSequence(
            text_ids=self.text_ids, visual=visual, kinds=self.kinds, positions=self.positions,
            frame_of=self.frame_of, video_shape=self.video_shape, num_text=self.num_text,
            num_reference=self.num_reference, num_motion=self.num_motion,
        )


def _grid_positions(frames: int, height: int, width: int, t_offset: int) -> torch.Tensor:
    t, h, w = torch.meshgrid(
        torch.arange(frames) + t_offset, torch.arange(height), torch.arange(width), indexing="ij"
    )
    return torch.stack([t, h, w], dim=-1).reshape(-1, 3)


def as_tensor(z: Array, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if isinstance(z, torch.Tensor):
        return z.to(dtype)
    return torch.from_numpy(np.asarray(z)).to(dtype)


def pack_tokens(
    z_noisy: torch.Tensor,
    z_ref: torch.Tensor,
    z_motion: Optional[torch.Tensor],
    text: TextTokens,
    cfg: ModelConfig,
) -> PackedSequence:
    """
    Pack conditioning and noisy latents into one sequence.

    Args:
        z_noisy: [Tlat, Hlat, Wlat, C] noisy video latent
        z_ref: [Tr, Hlat, Wlat, C] reference latent (usually Tr = 1)
        z_motion: [m, Hlat, Wlat, C] clean motion latents, or None
        text: caption ids
        cfg: model config (max motion frames)

    Returns:
        PackedSequence ordered [text | reference | motion | video]; reference at
        temporal index 0, motion at 0..m-1, video at m..m+Tlat-1
    """
    tl, h, w, c = z_noisy.shape
    if tuple(z_ref.shape[1:3]) != (h, w) or z_ref.shape[-1] != c:
        raise DimensionMismatchError(f"reference latent {tuple(z_ref.shape)} does not match video {tuple(z_noisy.shape)}")
    m = 0 if z_motion is None else z_motion.shape[0]
    if m > cfg.max_motion_frames:
        raise TooManyMotionFramesError(f"{m} motion frames exceed the maximum {cfg.max_motion_frames}")
    if z_motion is not None and (tuple(z_motion.shape[1:3]) != (h, w) or z_motion.shape[-1] != c):
        raise DimensionMismatchError(f"motion latent {tuple(z_motion.shape)} does not match video {tuple(z_noisy.shape)}")

    num_text = text.ids.shape[0]
    rows = [z_ref.reshape(-1, c)]
    if m:
        rows.append(z_motion.reshape(-1, c))
    rows.append(z_noisy.reshape(-1, c))
    visual = torch.cat([r.to(z_noisy.dtype) for r in rows], dim=0)

    ref_pos = _grid_positions(z_ref.shape[0], h, w, 0)
    ref_pos[:, 0] = 0
    positions = [torch.zeros((num_text, 3), dtype=torch.long), ref_pos]
    kinds = [torch.full((num_text,), KIND_TEXT), torch.full((ref_pos.shape[0],), KIND_REFERENCE)]
    frame_of = [torch.full((num_text + ref_pos.shape[0],), -1)]
    if m:
        positions.append(_grid_positions(m, h, w, 0))
        kinds.append(torch.full((m * h * w,), KIND_MOTION))
        frame_of.append(torch.full((m * h * w,), -1))
    positions.append(_grid_positions(tl, h, w, m))
    kinds.append(torch.full((tl * h * w,), KIND_VIDEO))
    frame_of.append(torch.arange(tl).repeat_interleave(h * w))

    return PackedSequence(
        text_ids=text.ids,
        visual=visual,
        kinds=torch.cat(kinds).long(),
        positions=torch.cat(positions).long(),
        frame_of=torch.cat(frame_of).long(),
        video_shape=(tl, h, w),
        num_text=num_text,
        num_reference=ref_pos.shape[0],
        num_motion=m * h * w,
    )


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of t in [0, 1] (scaled by 1000)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale[:, None]) + shift[:, None]


class StreamLayer(nn.Module):
    """Per-stream projections of one MMDiT block."""

    def __init__(self, dim: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_ratio * dim, dim),
        )
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))


class AudioCrossAttention(nn.Module):
    """Video tokens of latent frame f attend to frame f's audio token set only."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, video: torch.Tensor, sets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """
        Args:
            video: [B, Tlat, HW, D]
            sets: [B, Tlat, K, D]
            mask: [B, Tlat, K] True for real tokens

        Returns:
            [B, Tlat, HW, D] update for the video tokens
        """
        b, tl, hw, d = video.shape
        q = rearrange(self.q(self.norm(video)), "b f n (h e) -> (b f) h n e", h=self.num_heads)
        k, v = self.kv(sets).chunk(2, dim=-1)
        k = rearrange(k, "b f n (h e) -> (b f) h n e", h=self.num_heads)
        v = rearrange(v, "b f n (h e) -> (b f) h n e", h=self.num_heads)
        attn_mask = rearrange(mask, "b f n -> (b f) 1 1 n")
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.out(rearrange(out, "(b f) h n e -> b f n (h e)", b=b))


class OmniBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.joint_attention = cfg.joint_attention
        self.text = StreamLayer(cfg.hidden_size, cfg.mlp_ratio)
        self.visual = StreamLayer(cfg.hidden_size, cfg.mlp_ratio)
        self.audio_attn = AudioCrossAttention(cfg.hidden_size, cfg.num_heads)

    def forward(
        self,
        x: torch.Tensor,
        c: torch.Tensor,
        phases: torch.Tensor,
        seq: PackedSequence,
        audio_sets: torch.Tensor,
        audio_mask: torch.Tensor,
    ) -> torch.Tensor:
        lt = seq.num_text
        streams = (self.text, self.visual)
        parts = (x[:, :lt], x[:, lt:])
        mods = [layer.ada(c).chunk(6, dim=-1) for layer in streams]

        # joint self-attention with per-stream projections
        if self.joint_attention:
            qkv = [layer.qkv(modulate(layer.norm1(p), m[0], m[1])) for layer, p, m in zip(streams, parts, mods)]
            q, k, v = torch.cat(qkv, dim=1).chunk(3, dim=-1)
            q, k, v = (rearrange(t, "b n (h e) -> b h n e", h=self.num_heads) for t in (q, k, v))
            q, k = apply_rope(q, phases), apply_rope(k, phases)
            attn = rearrange(F.scaled_dot_product_attention(q, k, v), "b h n e -> b n (h e)")
            parts = tuple(
                p + m[2][:, None] * layer.proj(a)
                for layer, p, m, a in zip(streams, parts, mods, (attn[:, :lt], attn[:, lt:]))
            )

        # frame-wise audio cross-attention, video tokens only
        text_part, vis = parts
        start = seq.num_reference + seq.num_motion
        tl, h, w = seq.video_shape
        video = vis[:, start:].reshape(vis.shape[0], tl, h * w, -1)
        video = video + self.audio_attn(video, audio_sets, audio_mask)
        vis = torch.cat([vis[:, :start], video.reshape(vis.shape[0], tl * h * w, -1)], dim=1)

        parts = (text_part, vis)
        parts = tuple(
            p + m[5][:, None] * layer.mlp(modulate(layer.norm2(p), m[3], m[4]))
            for layer, p, m in zip(streams, parts, mods)
        )
        return torch.cat(parts, dim=1)


class OmniDiT(nn.Module):
    """
    Multi-condition denoiser.

    Owns every learned piece of the conditioning path: text embedding table,
    audio projector MLP, pose guider, and the learned null-audio token.
    """

    def __init__(self, cfg: ModelConfig, codec: CodecConfig, audio_feature_dim: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.codec = codec
        dim = cfg.hidden_size
        self.latent_channels = codec.channels
        self.pose_grid_channels = codec.gt * cfg.pose_channels
        audio_feature_dim = audio_feature_dim or 3 * cfg.audio_mel_bands

        self.text_embed = nn.Embedding(cfg.vocab_size, dim)
        self.x_embed = nn.Linear(self.latent_channels + self.pose_grid_channels, dim)
        self.t_embed = nn.Sequential(nn.Linear(256, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.audio_proj = AudioProjector(audio_feature_dim, dim, cfg.audio_mlp_depth)
        self.null_audio = nn.Parameter(torch.zeros(dim))
        self.pose_guider = PoseGuider(codec.sp, tuple(cfg.guider_channels), cfg.pose_channels)
        self.blocks = nn.ModuleList([OmniBlock(cfg) for _ in range(cfg.num_blocks)])
        self.final_norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.head = nn.Linear(dim, self.latent_channels)
        self.initialize_weights()

    def initialize_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.normal_(self.text_embed.weight, std=0.02)
        nn.init.normal_(self.null_audio, std=0.02)
        # adaLN-zero: every block starts as the identity
        for block in self.blocks:
            for layer in (block.text, block.visual):
                nn.init.zeros_(layer.ada[-1].weight)
                nn.init.zeros_(layer.ada[-1].bias)
        nn.init.zeros_(self.final_ada[-1].weight)
        nn.init.zeros_(self.final_ada[-1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        nn.init.zeros_(self.pose_guider.conv_out.weight)
        nn.init.zeros_(self.pose_guider.conv_out.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    # -- condition encoding -------------------------------------------------

    def encode_audio(self, feats: torch.Tensor, latent_frames: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Feature rows [T, F] -> per-latent-frame token sets and mask."""
        tokens = assemble_audio_tokens(feats.to(self.dtype), self.cfg.audio_window, self.audio_proj)
        return pool_audio_per_latent_frame(tokens, self.codec, latent_frames)

    def null_audio_sets(self, latent_frames: int) -> Tuple[torch.Tensor, torch.Tensor]:
        sets = self.null_audio.expand(latent_frames, 1, -1)
        mask = torch.ones((latent_frames, 1), dtype=torch.bool)
        return sets, mask

    def encode_pose(self, maps: torch.Tensor, latent_shape: Optional[Tuple[int, ...]] = None) -> torch.Tensor:
        return encode_pose_features(maps.to(self.dtype), self.codec, self.pose_guider, latent_shape)

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        seq: PackedSequence,
        t: Union[float, torch.Tensor],
        audio: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
        pose: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Predict the velocity of the video tokens.

        Args:
            seq: packed sequence
            t: noise level in [0, 1]
            audio: (sets [Tlat, K, D], mask [Tlat, K]) or None for the null-audio token
            pose: [Tlat, Hlat, Wlat, gt*Cp] pose grid or None for zeros

        Returns:
            [Tlat, Hlat, Wlat, C] velocity

        Raises:
            NonFiniteError: naming the first block that produced a non-finite activation
        """
        dtype = self.dtype
        tl, h, w = seq.video_shape
        if audio is None:
            audio = self.null_audio_sets(tl)
        audio_sets, audio_mask = audio
        if audio_sets.shape[0] != tl:
            raise DimensionMismatchError(f"audio has {audio_sets.shape[0]} latent frames, video has {tl}")
        if pose is None:
            pose = torch.zeros((tl, h, w, self.pose_grid_channels), dtype=dtype)
        if tuple(pose.shape[:3]) != (tl, h, w):
            raise DimensionMismatchError(f"pose grid {tuple(pose.shape)} does not match video tokens {(tl, h, w)}")

        # pose rides along the noisy rows; clean reference/motion rows get zeros
        pose_rows = torch.cat([
            torch.zeros((seq.num_reference + seq.num_motion, self.pose_grid_channels), dtype=dtype),
            pose.reshape(-1, self.pose_grid_channels).to(dtype),
        ])
        vis = self.x_embed(torch.cat([seq.visual.to(dtype), pose_rows], dim=-1))
        x = torch.cat([self.text_embed(seq.text_ids), vis], dim=0)[None]

        t = torch.as_tensor(t, dtype=dtype).reshape(1)
        c = self.t_embed(timestep_embedding(t, 256))
        phases = build_rope(seq.positions, seq.kinds, self.cfg)

        for index, block in enumerate(self.blocks):
            x = block(x, c, phases, seq, audio_sets[None].to(dtype), audio_mask[None])
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activation in block {index}", block=index)

        video = x[:, seq.num_text + seq.num_reference + seq.num_motion:]
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        out = self.head(modulate(self.final_norm(video), shift, scale))
        return out[0].reshape(tl, h, w, self.latent_channels)

    def parameter_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        """Named parameters grouped by top-level component (for gradient checks and logging)."""
        groups: Dict[str, List[Tuple[str, nn.Parameter]]] = {}
        for name, param in self.named_parameters():
            parts = name.split(".")
            key = ".".join(parts[:3]) if parts[0] == "blocks" else parts[0]
            groups.setdefault(key, []).append((name, param))
        return groups


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

@dataclass
class NoiseState:
    t: float
    x_t: Array
    target_v: Optional[Array] = None


def flow_pair(x0: Array, noise: Array, t: float) -> NoiseState:
    """Rectified-flow interpolant: x_t = (1 - t) x0 + t noise, target v = noise - x0."""
    if tuple(x0.shape) != tuple(noise.shape):
        raise DimensionMismatchError(f"clean latent {tuple(x0.shape)} and noise {tuple(noise.shape)} differ")
    if not 0.0 <= float(t) <= 1.0:
        raise ValueRangeError(f"t must lie in [0, 1], got {t}")
    return NoiseState(t=float(t), x_t=(1.0 - t) * x0 + t * noise, target_v=noise - x0)


def mse_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error over the entries selected by ``mask`` (broadcast to ``pred``)."""
    if mask is None:
        return F.mse_loss(pred, target)
    mask = mask.expand_as(pred).to(pred.dtype)
    count = mask.sum()
    if count == 0:
        raise MaskEmptyError("loss mask selects no entries")
    return ((pred - target) ** 2 * mask).sum() / count
