"""Little-endian helpers shared by the binary artifact formats.

Every format opens with ``magic (4 bytes) | u8 version | u8 n | n ascii bytes``
where the trailing string is the config hash of the producing stage.
"""

from __future__ import annotations

import struct
from typing import Tuple

import numpy as np

from .errors import FormatError


def header(magic: bytes, version: int, config_hash: str) -> bytes:
    tag = config_hash.encode("ascii")
    if len(tag) > 255:
        raise ValueError("config hash longer than 255 bytes")
    return magic + struct.pack("<BB", version, len(tag)) + tag


def parse_header(data: bytes, magic: bytes, version: int, what: str = "file") -> Tuple[str, int]:
    """Return (config_hash, offset of the body)."""
    if len(data) < 6 or data[:4] != magic:
        raise FormatError(f"{what}: bad magic, expected {magic!r}")
    if data[4] != version:
        raise FormatError(f"{what}: unsupported version {data[4]}")
    end = 6 + data[5]
    if len(data) < end:
        raise FormatError(f"{what}: truncated header")
    return data[6:end].decode("ascii"), end


class Reader:
    """Cursor over a bytes buffer that raises FormatError on short reads."""

    def __init__(self, data: bytes, pos: int = 0, what: str = "file"):
        self.data, self.pos, self.what = data, pos, what

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(4 * count), dtype="<f4").astype(np.float32)

    def text(self) -> str:
        (n,) = self.unpack("<H")
        return self.raw(n).decode("utf-8")

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()
