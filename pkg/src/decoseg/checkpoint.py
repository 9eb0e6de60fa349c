"""Binary checkpoint format shared by all parameter sets.

Little-endian layout::

    b"DCPL"            magic
    u32                format version (1)
    u32                tensor count
    per tensor:
        u32            name length in bytes
        bytes          UTF-8 name (e.g. "cls.block1.conv.weight")
        u8             rank
        rank x u64     dims
        prod(dims) x f64  values, row-major
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DCPL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} does not fit in a u8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = values.reshape(dims)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last tensor")
    return out


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return loads(path.read_bytes())
