"""Binary checkpoint I/O for named float64 tensors.

Layout (little-endian): magic ``MSCT``, version u32, entry count u32, then
per entry: name length u16, name bytes (utf-8), dtype u8 (0 = f64), rank u8,
extents u32 per axis, raw row-major data. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSCT"
VERSION = 1
DTYPE_F64 = 0


class CheckpointError(ValueError):
    """Raised on a malformed or truncated checkpoint file."""


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in insertion order. Arrays are stored as f64."""
    blobs = [struct.pack("<4sII", MAGIC, VERSION, len(tensors))]
    for name, arr in tensors.items():
        data = np.asarray(arr, dtype=np.float64, order="C")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {len(name_b)} bytes")
        blobs.append(struct.pack("<H", len(name_b)))
        blobs.append(name_b)
        blobs.append(struct.pack("<BB", DTYPE_F64, data.ndim))
        blobs.append(struct.pack(f"<{data.ndim}I", *data.shape))
        blobs.append(data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> float64 array dict (file order)."""
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    magic, version, count = struct.unpack("<4sII", take(12, "header"))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype != DTYPE_F64:
            raise CheckpointError(f"unknown dtype {dtype} for entry {name!r} at offset {off - 2}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * n, f"data of {name!r}"), dtype="<f8")
        out[name] = data.reshape(shape).astype(np.float64).copy()
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after last entry at offset {off}")
    return out
