"""The XFTN named-tensor container.

Layout (little-endian): magic ``XFTN``, version u16, record count u32,
then per record: name length u16, UTF-8 name, rank u8, extents u32 each,
raw f32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"XFTN"
VERSION = 1


class FormatError(ValueError):
    """Malformed, truncated or incompatible container."""


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated at byte {self.pos}, needed {n} bytes, "
                f"{end - len(self.buf)} bytes missing"
            )
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(buf: bytes, what: str = "checkpoint") -> dict[str, np.ndarray]:
    r = _Reader(buf, what)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported format version {version} (reader supports {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        extents = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(extents)) if rank else 1
        out[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(extents).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes after {count} records")
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode_tensors(path.read_bytes(), what=str(path))
