"""Named-tensor container format.

Layout (all integers u32 little-endian)::

    b"EFNT" | version | count | { name_len | name (utf-8) | ndim | extents... | float32 payload }*
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"EFNT"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, path: str | None):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos, self.path)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def loads(buf: bytes, path: str | None = None) -> dict[str, np.ndarray]:
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'EFNT'", 0, path)
    ver_at = r.pos
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", ver_at, path)
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid utf-8", at + 4, path) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", at, path)
        ndim = r.u32("ndim")
        shape = tuple(r.u32("extent") for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last tensor", r.pos, path)
    return tensors


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes(), str(path))
