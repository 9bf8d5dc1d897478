"""Binary parameter files.

Layout (little-endian)::

    b"SKLR"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 values[prod(dims)]
"""
from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from typing import Mapping, Union

import numpy as np

from ..errors import CheckpointError
from .tensor import DiffTensor

MAGIC = b"SKLR"
VERSION = 1

ArrayLike = Union[np.ndarray, DiffTensor]


def encode(arrays: Mapping[str, ArrayLike]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        values = arr.values if isinstance(arr, DiffTensor) else np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes; not a SKLR file")
    if len(data) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = 8
    n = len(data)

    def take(size):
        nonlocal pos
        if pos + size > n:
            raise CheckpointError(f"truncated record at byte {pos}")
        chunk = data[pos:pos + size]
        pos += size
        return chunk

    while pos < n:
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        if name in out:
            raise CheckpointError(f"duplicate record {name!r}")
        out[name] = values
    return out


def atomic_write(path: Union[str, os.PathLike], data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".sklr")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays: Mapping[str, ArrayLike]) -> None:
    atomic_write(path, encode(arrays))


def load(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode(fh.read())
