"""Binary tensor container and label CSV files.

Tensor file layout (little-endian)::

    "NKT1" | u8 ndim | u32 dims[ndim] | f64 payload | u32 CRC-32 of everything before it
"""

from __future__ import annotations

import csv
import math
import os
import struct
import zlib

import numpy as np

from nkscale.errors import CorruptBlockError

TENSOR_MAGIC = b"NKT1"


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = head + arr.tobytes()
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TENSOR_MAGIC:
        raise CorruptBlockError(f"{path}: bad tensor magic")
    ndim = data[4]
    dims = struct.unpack_from(f"<{ndim}I", data, 5)
    start = 5 + 4 * ndim
    end = start + 8 * math.prod(dims)
    if len(data) != end + 4:
        raise CorruptBlockError(f"{path}: truncated tensor file")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != crc:
        raise CorruptBlockError(f"{path}: CRC-32 mismatch")
    return np.frombuffer(data, dtype="<f8", count=math.prod(dims), offset=start).reshape(dims).copy()


def write_labels(path, values) -> None:
    """Write an (n,) or (n, T) label array as CSV; NaN is written as an empty cell."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"task{t}" for t in range(values.shape[1])])
        for row in values:
            w.writerow(["" if np.isnan(v) else repr(float(v)) for v in row])


def read_labels(path) -> np.ndarray:
    """Read a label CSV (header row, one column per task); empty or NaN cells become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:] if rows and not _is_numeric_row(rows[0]) else rows
    out = np.array([[float(c) if c.strip() not in ("", "nan", "NaN") else np.nan for c in r] for r in body])
    return out.reshape(len(body), -1)


def _is_numeric_row(row):
    try:
        [float(c) for c in row if c.strip()]
        return True
    except ValueError:
        return False
