"""Flat little-endian float32 tensor files ("AFFD").

Layout: 4 magic bytes ``AFFD``, a u32 version (1), then raw ``<f4`` values in
row-major order. Offsets handed around by callers are absolute byte offsets
into the file, so the first payload value sits at ``HEADER_SIZE``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AFFD"
VERSION = 1
HEADER = struct.Struct("<4sI")
HEADER_SIZE = HEADER.size
DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    """Raised for malformed dataset, checkpoint or tensor files."""


class AffdWriter:
    """Append float32 blocks to an AFFD file, returning their byte offsets."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._fh.write(HEADER.pack(MAGIC, VERSION))
        self._pos = HEADER_SIZE

    def append(self, array) -> int:
        arr = np.ascontiguousarray(np.asarray(array, dtype=DTYPE))
        offset = self._pos
        data = arr.tobytes(order="C")
        self._fh.write(data)
        self._pos += len(data)
        return offset

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_payload(path: str | Path) -> np.ndarray:
    """Return the whole payload of an AFFD file as a flat float32 array."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing tensor file {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header")
    magic, version = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = len(raw) - HEADER_SIZE
    if body % DTYPE.itemsize:
        raise FormatError(f"{path}: payload is not a whole number of float32 values")
    return np.frombuffer(raw, dtype=DTYPE, offset=HEADER_SIZE).astype(np.float32)


def slice_rows(payload: np.ndarray, offset: int, rows: int, dim: int) -> np.ndarray | None:
    """Cut a ``rows x dim`` block starting at byte ``offset``; None if out of range."""
    if offset < HEADER_SIZE or (offset - HEADER_SIZE) % DTYPE.itemsize:
        return None
    start = (offset - HEADER_SIZE) // DTYPE.itemsize
    stop = start + rows * dim
    if rows < 0 or stop > payload.size:
        return None
    return payload[start:stop].reshape(rows, dim).copy()
