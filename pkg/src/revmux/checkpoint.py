"""Binary checkpoint container shared by backbone and adapter weights.

Layout (all integers little-endian):

    magic    4 bytes  b"RVMX"
    version  u32      currently 1
    count    u32      number of entries
    entry:   u32 name length, UTF-8 name bytes,
             u32 dtype tag (0 = float32),
             u32 rank, u64 extent per axis,
             raw row-major float32 data

Values are always stored as float32; loading casts to the target dtype.
Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"RVMX"
VERSION = 1
_DTYPE_F32 = 0


class CheckpointFormatError(RuntimeError):
    """Raised on bad magic, version, or truncated container."""


def save_arrays(path: str, arrays: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=np.float32)
        name_b = name.encode("utf-8")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<II", _DTYPE_F32, data.ndim)
        blob += struct.pack(f"<{data.ndim}Q", *data.shape)
        blob += data.astype("<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported container version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            dtype_tag, rank = struct.unpack_from("<II", blob, off)
            off += 8
            if dtype_tag != _DTYPE_F32:
                raise CheckpointFormatError(f"{path}: unknown dtype tag {dtype_tag} for entry {name!r}")
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            out[name] = np.array(arr)  # owned, writable copy
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated container") from exc
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return out
