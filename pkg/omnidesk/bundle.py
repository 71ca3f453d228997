"""Per-sample conditions shared by training and inference."""

from dataclasses import dataclass, replace
from typing import Optional

import torch

from omnidesk.condition_encoders import TextTokens, null_text
from omnidesk.omnidit import OmniDiT, pack_tokens


@dataclass(frozen=True)
class ConditionMask:
    """Which driving conditions are active. The reference image always is."""

    text: bool = True
    audio: bool = False
    pose: bool = False
    motion_frames: bool = False

    @property
    def reference(self) -> bool:
        return True

    def active(self) -> list:
        return [name for name in ("text", "audio", "pose") if getattr(self, name)]


@dataclass
class ConditionBundle:
    """
    Everything the denoiser is conditioned on for one sample. Dropped
    conditions are already in their null form: NULL caption ids, ``None``
    audio features (learned null token) and ``None`` pose maps (zero grid).
    """

    text: TextTokens
    reference: torch.Tensor  # [1, Hlat, Wlat, C]
    motion: Optional[torch.Tensor]  # [m, Hlat, Wlat, C]
    audio_feats: Optional[torch.Tensor]  # [T, F] rows for the frames being generated
    pose_maps: Optional[torch.Tensor]  # [T, H, W, 3]
    mask: ConditionMask

    def without_audio_and_text(self) -> "ConditionBundle":
        """The CFG unconditional branch: audio and text nulled, pose/reference/motion kept."""
        return replace(
            self,
            text=null_text(self.text.ids.shape[0]),
            audio_feats=None,
            mask=replace(self.mask, text=False, audio=False),
        )


def denoise(model: OmniDiT, bundle: ConditionBundle, x_t: torch.Tensor, t: float) -> torch.Tensor:
    """Run the denoiser on noisy latent ``x_t`` [Tlat, Hlat, Wlat, C] under ``bundle``."""
    seq = pack_tokens(x_t, bundle.reference, bundle.motion, bundle.text, model.cfg)
    latent_frames = x_t.shape[0]
    audio = None if bundle.audio_feats is None else model.encode_audio(bundle.audio_feats, latent_frames)
    pose = None if bundle.pose_maps is None else model.encode_pose(bundle.pose_maps, tuple(x_t.shape))
    return model(seq, t, audio=audio, pose=pose)
