"""Flat binary weight checkpoints.

Layout: ``b"DRH1"`` then, per tensor, ``uint32`` name length, UTF-8 name,
``uint32`` rank, ``rank`` x ``uint64`` dims, and the little-endian float64
payload in C order. Records run to end of file.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"DRH1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, Tensor | np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a DRH1 checkpoint (bad magic)")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos: pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = blob[pos: pos + 8 * count]
            if len(payload) != 8 * count:
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save(path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def checksum(tensors: Mapping[str, Tensor | np.ndarray]) -> str:
    return hashlib.sha256(dumps(tensors)).hexdigest()
