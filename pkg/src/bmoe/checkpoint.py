"""Named-tensor checkpoint file: magic "BMO1", then little-endian entries.

Layout: magic (4 bytes), u32 entry count; per entry u32 name length,
UTF-8 name, u32 rank, u32 extents, then float32 values. Values are stored
as 32-bit floats, so round-trips are bit-exact for float32 parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"BMO1"


class CheckpointError(IOError):
    """Malformed or truncated checkpoint file."""


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes, got {len(buf)}")
    return buf


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype=np.float32)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} in {path}, expected {MAGIC!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            nbytes = 4 * int(np.prod(shape)) if rank else 4
            data = np.frombuffer(_read_exact(f, nbytes), dtype="<f4")
            out[name] = data.reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError(f"unexpected trailing bytes in {path}")
    return out
