"""Binary checkpoint files.

Layout (little-endian)::

    magic   b"XMCK"
    version u32        1: float64 payloads, 2: float32 payloads
    count   u32
    count x (name_len u32, name bytes (utf-8), rank u32, rank x extent u32, payload)

Optimizer moments, the epoch and the seed are stored as ordinary named
tensors (``adam.m.*``, ``adam.v.*``, ``meta.*``).
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from xmodal.errors import InputError

MAGIC = b"XMCK"
VERSION_F64 = 1
VERSION_F32 = 2


def dumps(tensors: Mapping[str, np.ndarray], single_precision: bool = False) -> bytes:
    version = VERSION_F32 if single_precision else VERSION_F64
    dtype = "<f4" if single_precision else "<f8"
    parts = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version not in (VERSION_F64, VERSION_F32):
            raise InputError(f"unsupported checkpoint version {version}")
        dtype = np.dtype("<f8" if version == VERSION_F64 else "<f4")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) * dtype.itemsize
            if pos + size > len(buf):
                raise InputError(f"checkpoint truncated in tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=pos).astype(np.float64).reshape(shape)
            pos += size
    except struct.error as exc:
        raise InputError(f"checkpoint truncated: {exc}") from exc
    if pos != len(buf):
        raise InputError("trailing bytes after the last tensor")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray], single_precision: bool = False) -> Path:
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dumps(tensors, single_precision)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
