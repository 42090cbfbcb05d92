"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GLUA"                 magic
    u32                     version (1)
    u32                     tensor count
    per tensor:
        u32                 name length in bytes
        bytes               name, UTF-8
        u8                  dtype (0 = f32, 1 = f64)
        u32                 rank
        u64 * rank          dims
        bytes               payload, row-major little-endian

Tensors are written in the order given, so load -> save reproduces a file
byte for byte.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"GLUA"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}", 0)
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        have = len(self.buf) - self.pos
        if n > have:
            raise CheckpointError(
                f"truncated checkpoint: {what} needs {n} bytes, only {have} remain "
                f"(expected length >= {self.pos + n}, actual {len(self.buf)})", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"tensor {i} name length")
        at = r.pos
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i} name is not valid UTF-8", at) from None
        at = r.pos
        code, rank = r.unpack("<BI", f"tensor {name!r} dtype/rank")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}", at)
        dims = r.unpack(f"<{rank}Q", f"tensor {name!r} dims")
        nbytes = _DTYPES[code].itemsize * int(np.prod(dims, dtype=object))
        # take() checks the length before anything of payload size is allocated
        payload = r.take(nbytes, f"tensor {name!r} payload")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}", at)
        arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(dims)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor", r.pos)
    return tensors


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def checkpoint_save(model, path: str | Path) -> None:
    save_tensors(path, model.state_dict())


def checkpoint_load(model, path: str | Path):
    """Load weights from ``path`` into ``model`` (names, shapes and dtypes must match)."""
    model.load_state_dict(load_tensors(path))
    return model
