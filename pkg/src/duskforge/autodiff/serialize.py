"""Binary checkpoint container for named tensors.

Layout (little-endian)::

    b"DFTN" | version u32 | count u32 |
    per tensor: name_len u32 | name utf-8 | rank u32 | extents u32[rank] | dtype u8 | raw data
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DFTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    """Raised for malformed or truncated checkpoint files."""


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", _TAGS[arr.dtype]))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic; not a DFTN checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not valid UTF-8: {exc}") from None
        (rank,) = struct.unpack("<I", take(4, f"{name} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        (tag,) = struct.unpack("<B", take(1, f"{name} dtype"))
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dtype = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(n * dtype.itemsize, f"{name} data"), dtype=dtype).reshape(shape)
        out[name] = data.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
