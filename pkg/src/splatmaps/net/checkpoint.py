"""Checkpoint container.

Layout (little-endian)::

    b"GSCK"  u32 version  u32 json_len  json_bytes   # config + training state
    u32 n_tensors
    repeated: u32 name_len  name_utf8  u32 ndim  u32[ndim] shape  f32[prod(shape)]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

CKPT_MAGIC = b"GSCK"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def write_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)]
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    version, jlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(take(jlen))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, meta


def save_model(path, model: torch.nn.Module, config: dict, state: dict | None = None) -> None:
    write_checkpoint(path, model.state_dict(), {"config": config, "state": state or {}})


def load_model(path):
    """Rebuild a :class:`GsMapNet` from a checkpoint; returns ``(model, config, state)``."""
    from .config import Config
    from .model import GsMapNet

    tensors, meta = read_checkpoint(path)
    cfg = Config.from_dict(meta["config"])
    model = GsMapNet(cfg.model)
    model.load_state_dict(tensors)
    return model, cfg, meta.get("state", {})
