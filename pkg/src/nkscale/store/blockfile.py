"""On-disk block format.

Layout (little-endian)::

    "NKB1" | u16 version | u32 rows | u32 cols | u8 dtype (0 = f64) | payload row-major | u64 CRC-64

The CRC-64 (ECMA-182 polynomial, CRC-64/WE parameters) covers header and payload.
"""

from __future__ import annotations

import os
import struct

import crcmod.predefined
import numpy as np

from nkscale.errors import CorruptBlockError

MAGIC = b"NKB1"
VERSION = 1
DTYPE_F64 = 0
_HEADER = struct.Struct("<4sHIIB")
HEADER_SIZE = _HEADER.size
TRAILER_SIZE = 8

crc64 = crcmod.predefined.mkPredefinedCrcFun("crc-64-we")


def encode_block(block) -> bytes:
    arr = np.ascontiguousarray(block, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError("blocks are 2D")
    body = _HEADER.pack(MAGIC, VERSION, arr.shape[0], arr.shape[1], DTYPE_F64) + arr.tobytes()
    return body + struct.pack("<Q", crc64(body))


def decode_block(data: bytes, label: str = "block") -> tuple[np.ndarray, int]:
    """Return ``(array, crc)``; raise :class:`CorruptBlockError` on any mismatch."""
    if len(data) < HEADER_SIZE + TRAILER_SIZE:
        raise CorruptBlockError(f"{label}: file too short")
    magic, version, rows, cols, dtype = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION or dtype != DTYPE_F64:
        raise CorruptBlockError(f"{label}: bad header")
    end = HEADER_SIZE + 8 * rows * cols
    if len(data) != end + TRAILER_SIZE:
        raise CorruptBlockError(f"{label}: size {len(data)} does not match {rows}x{cols} header")
    (stored,) = struct.unpack_from("<Q", data, end)
    actual = crc64(data[:end])
    if stored != actual:
        raise CorruptBlockError(f"{label}: CRC-64 mismatch")
    arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=HEADER_SIZE).reshape(rows, cols)
    return arr.astype(np.float64), actual


def file_size(rows: int, cols: int) -> int:
    return HEADER_SIZE + 8 * rows * cols + TRAILER_SIZE


def write_block_file(path, block, before_rename=None) -> int:
    """Write atomically (temp file + rename) and return the CRC-64.

    ``before_rename`` is a test hook called with the temp path after the payload
    has been flushed but before it becomes visible under ``path``.
    """
    data = encode_block(block)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    if before_rename is not None:
        before_rename(tmp)
    os.replace(tmp, path)
    (crc,) = struct.unpack_from("<Q", data, len(data) - TRAILER_SIZE)
    return crc


def read_block_file(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        return decode_block(fh.read(), str(path))
