"""Binary parameter checkpoints.

Layout (little-endian): ``b"PRGC"``, u32 version, u32 entry count, then per
entry u32 name length, UTF-8 name, u32 rank, u32 dims, float32 values.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

MAGIC = b"PRGC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return out


def save(path, params: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(params))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
