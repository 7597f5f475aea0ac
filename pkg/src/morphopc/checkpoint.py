"""Flat binary parameter container.

Layout (little endian)::

    b"MOPC" | version u32 | count u32
    per record: name_len u32 | name utf-8 | rank u32 | dims u32 * rank | float32 * prod(dims)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MOPC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    def take(n, off, what):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {off}")
        return buf[off : off + n], off + n

    head, off = take(12, 0, "header")
    if head[:4] != MAGIC:
        raise CheckpointError("bad magic at byte 0")
    version, count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        b, off = take(4, off, "name length")
        (nlen,) = struct.unpack("<I", b)
        b, off = take(nlen, off, "name")
        name = b.decode("utf-8")
        b, off = take(4, off, "rank")
        (rank,) = struct.unpack("<I", b)
        b, off = take(4 * rank, off, "dims")
        dims = struct.unpack(f"<{rank}I", b)
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        b, off = take(4 * n, off, f"data of {name!r}")
        arrays[name] = np.frombuffer(b, dtype="<f4").reshape(dims).copy()
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after last record at byte {off}")
    return arrays


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
