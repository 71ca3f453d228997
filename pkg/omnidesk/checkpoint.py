"""
OHCK checkpoints.

Layout (all little-endian):
    "OHCK" | u32 version | u32 n | n bytes JSON header (ModelConfig, CodecConfig,
    model hash) | named parameter tensors | named optimizer moments |
    u32 n | n bytes JSON run state

Each tensor record: u16 name length, name, u8 ndim, ndim x u32 dims, float32 data.
"""

import io
import json
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Tuple

import numpy as np
import torch

from omnidesk.config import CodecConfig, ModelConfig
from omnidesk.errors import CheckpointError, HashMismatchError
from omnidesk.omnidit import OmniDiT

logger = logging.getLogger(__name__)

MAGIC = b"OHCK"
VERSION = 1


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    codec_cfg: CodecConfig
    model_hash: str
    audio_feature_dim: int
    params: Dict[str, torch.Tensor]
    moments: Dict[str, torch.Tensor] = field(default_factory=dict)
    run_state: Dict[str, Any] = field(default_factory=dict)


def _write_blob(f: BinaryIO, payload: Dict[str, Any]) -> None:
    data = json.dumps(payload, sort_keys=True).encode()
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_blob(f: BinaryIO) -> Dict[str, Any]:
    (length,) = struct.unpack("<I", f.read(4))
    return json.loads(f.read(length).decode())


def _write_tensors(f: BinaryIO, tensors: Dict[str, torch.Tensor]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        encoded = name.encode()
        array = tensor.detach().cpu().numpy().astype("<f4")
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<B", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array).tobytes())


def _read_tensors(f: BinaryIO) -> Dict[str, torch.Tensor]:
    (count,) = struct.unpack("<I", f.read(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", f.read(2))
        name = f.read(name_len).decode()
        (ndim,) = struct.unpack("<B", f.read(1))
        dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        array = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(array.astype(np.float32))
    return tensors


def optimizer_moments(model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer]) -> Dict[str, torch.Tensor]:
    """Flatten AdamW state into named tensors ("exp_avg/<param>", ...)."""
    if optimizer is None:
        return {}
    moments = {}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            moments[f"{key}/{name}"] = torch.as_tensor(state[key], dtype=torch.float32)
    return moments


def save_checkpoint(
    path: Path,
    model: OmniDiT,
    optimizer: Optional[torch.optim.Optimizer] = None,
    run_state: Optional[Dict[str, Any]] = None,
    model_hash: str = "",
) -> None:
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<I", VERSION))
    _write_blob(buffer, {
        "model": model.cfg.model_dump(mode="json"),
        "codec": model.codec.model_dump(mode="json"),
        "model_hash": model_hash,
        "audio_feature_dim": model.audio_proj.net[1].in_features,
    })
    _write_tensors(buffer, dict(model.named_parameters()))
    _write_tensors(buffer, optimizer_moments(model, optimizer))
    _write_blob(buffer, run_state or {})

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} ({len(buffer.getvalue()) / 1e6:.1f} MB)")


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise CheckpointError(f"{path} is not an OHCK checkpoint")
            (version,) = struct.unpack("<I", f.read(4))
            if version != VERSION:
                raise CheckpointError(f"{path} has unsupported version {version}")
            header = _read_blob(f)
            params = _read_tensors(f)
            moments = _read_tensors(f)
            run_state = _read_blob(f)
    except (OSError, struct.error, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")

    return Checkpoint(
        model_cfg=ModelConfig.model_validate(header["model"]),
        codec_cfg=CodecConfig.model_validate(header["codec"]),
        model_hash=header.get("model_hash", ""),
        audio_feature_dim=header["audio_feature_dim"],
        params=params,
        moments=moments,
        run_state=run_state,
    )


def restore_model(ckpt: Checkpoint, expected_hash: Optional[str] = None) -> OmniDiT:
    """Rebuild the model; refuse a checkpoint whose model hash differs from ``expected_hash``."""
    if expected_hash and ckpt.model_hash and ckpt.model_hash != expected_hash:
        raise HashMismatchError(
            f"checkpoint was trained with config {ckpt.model_hash[:12]}, run config is {expected_hash[:12]}"
        )
    model = OmniDiT(ckpt.model_cfg, ckpt.codec_cfg, ckpt.audio_feature_dim)
    missing = set(dict(model.named_parameters())) - set(ckpt.params)
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(ckpt.params[name])
    return model


def restore_optimizer(ckpt: Checkpoint, model: OmniDiT, optimizer: torch.optim.Optimizer) -> None:
    for name, param in model.named_parameters():
        key = f"exp_avg/{name}"
        if key not in ckpt.moments:
            continue
        optimizer.state[param] = {
            "step": ckpt.moments[f"step/{name}"].clone(),
            "exp_avg": ckpt.moments[key].clone(),
            "exp_avg_sq": ckpt.moments[f"exp_avg_sq/{name}"].clone(),
        }
