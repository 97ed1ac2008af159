"""Binary matrix files (``.rmdm``).

Layout, all little-endian::

    b"RMDM" | version u16 | rows u64 | cols u64 | rows*cols float64 (row-major) | crc32 u32

The CRC covers the float payload only.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "VERSION", "CorruptFileError", "read_matrix", "write_matrix"]

MAGIC = b"RMDM"
VERSION = 1
_HEADER = struct.Struct("<4sHQQ")
_CRC = struct.Struct("<I")


class CorruptFileError(IOError):
    """Raised when a matrix file fails its structural or CRC check."""


def write_matrix(path, matrix) -> None:
    """Write a 1D (as one column) or 2D array atomically."""
    a = np.asarray(matrix, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("only 1D or 2D arrays can be stored")
    payload = np.ascontiguousarray(a).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, a.shape[0], a.shape[1]))
        fh.write(payload)
        fh.write(_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))
    os.replace(tmp, path)


def read_matrix(path) -> np.ndarray:
    """Read and verify a matrix file; returns a 2D float64 array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _CRC.size:
        raise CorruptFileError(f"{path}: file too short")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    n = rows * cols * 8
    if len(data) != _HEADER.size + n + _CRC.size:
        raise CorruptFileError(f"{path}: payload length does not match {rows}x{cols}")
    payload = data[_HEADER.size : _HEADER.size + n]
    (crc,) = _CRC.unpack_from(data, _HEADER.size + n)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptFileError(f"{path}: CRC mismatch")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
