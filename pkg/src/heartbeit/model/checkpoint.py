"""Checkpoint files (``.hbck``), little-endian::

    b"HBCK" | u8 version | u8 len + ascii config hash
    u16 len + ModelConfig JSON
    u16 len + metadata JSON (optimizer hyperparameters, step count, run info)
    u32 count, then per parameter:  u16 len + name | u8 ndim | u32 dims... | f32 data
    u32 count, then optimizer-state arrays in the same layout

JSON is written with sorted keys so equal checkpoints serialize to equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .. import binio
from .vit import ModelConfig, Params, check_params

CHECKPOINT_MAGIC = b"HBCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    config_hash: str = ""


def _table(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a)
        parts.append(binio.text(name) + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(binio.f32(a))
    return b"".join(parts)


def _read_table(r: binio.Reader) -> Dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        name = r.text()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        out[name] = r.f32(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    check_params(ckpt.params, ckpt.config)
    return b"".join(
        [
            binio.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ckpt.config_hash),
            binio.text(ckpt.config.to_json()),
            binio.text(json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":"))),
            _table(ckpt.params),
            _table(ckpt.optimizer),
        ]
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    config_hash, pos = binio.parse_header(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, str(path))
    r = binio.Reader(data, pos, str(path))
    config = ModelConfig.from_dict(json.loads(r.text()))
    meta = json.loads(r.text())
    params = _read_table(r)
    optimizer = _read_table(r)
    check_params(params, config)
    return Checkpoint(config, params, optimizer, meta, config_hash)
