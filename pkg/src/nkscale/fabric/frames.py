"""Wire frames for the host/worker matvec protocol.

Layout (little-endian)::

    "NKMV" | u8 kind | u64 request_id | u32 block_row | u32 block_col
           | u32 row_len | u32 col_len | payload f64[row_len * col_len] | u32 CRC-32

Extents describe the payload: a segment push carries the column segment
(segment length x T), a partial result the block product (block rows x T).
A segment push with ``row_len == 0`` tells the worker to reuse the segment it
already received for that block column in the same request. Error frames carry
a UTF-8 message NUL-padded to a multiple of 8 bytes (``col_len == 1``).
"""

from __future__ import annotations

import socket
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from nkscale.errors import FrameError

MAGIC = b"NKMV"
SEGMENT, PARTIAL, ACK, ERROR = 1, 2, 3, 4
KINDS = {SEGMENT: "segment-push", PARTIAL: "partial-result", ACK: "ack", ERROR: "error"}

_HEADER = struct.Struct("<4sBQIIII")
HEADER_SIZE = _HEADER.size
_CRC = struct.Struct("<I")


@dataclass
class Frame:
    kind: int
    request_id: int
    block_row: int = 0
    block_col: int = 0
    payload: np.ndarray | None = None

    @property
    def extents(self) -> tuple:
        if self.payload is None:
            return (0, 0)
        return self.payload.shape

    def message(self) -> str:
        return self.payload.tobytes().rstrip(b"\0").decode("utf-8", "replace")

    @property
    def coords(self):
        return (self.block_row, self.block_col)


def error_frame(request_id: int, msg: str) -> Frame:
    raw = msg.encode("utf-8")
    raw += b"\0" * (-len(raw) % 8)
    return Frame(ERROR, request_id, payload=np.frombuffer(raw, dtype="<f8").reshape(-1, 1))


def encode_frame(f: Frame) -> bytes:
    if f.kind not in KINDS:
        raise FrameError(f"unknown frame kind {f.kind}")
    payload = b""
    rows = cols = 0
    if f.payload is not None:
        arr = np.ascontiguousarray(f.payload, dtype="<f8")
        if arr.ndim != 2:
            raise FrameError("frame payloads are 2D")
        rows, cols = arr.shape
        payload = arr.tobytes()
    head = _HEADER.pack(MAGIC, f.kind, f.request_id, f.block_row, f.block_col, rows, cols)
    body = head + payload
    return body + _CRC.pack(zlib.crc32(body))


def _parse_header(head: bytes):
    magic, kind, rid, br, bc, rows, cols = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FrameError("bad frame magic")
    if kind not in KINDS:
        raise FrameError(f"unknown frame kind {kind}")
    return kind, rid, br, bc, rows, cols


def _build(kind, rid, br, bc, rows, cols, payload: bytes) -> Frame:
    arr = None
    if kind in (SEGMENT, PARTIAL, ERROR) and (rows or cols):
        arr = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return Frame(kind, rid, br, bc, arr)


def decode_frame(data: bytes) -> Frame:
    if len(data) < HEADER_SIZE + _CRC.size:
        raise FrameError("frame too short")
    kind, rid, br, bc, rows, cols = _parse_header(data[:HEADER_SIZE])
    end = HEADER_SIZE + 8 * rows * cols
    if len(data) != end + _CRC.size:
        raise FrameError("payload length inconsistent with extents")
    (crc,) = _CRC.unpack_from(data, end)
    if crc != zlib.crc32(data[:end]):
        raise FrameError("CRC-32 mismatch")
    return _build(kind, rid, br, bc, rows, cols, data[HEADER_SIZE:end])


class FrameStream:
    """Frame reader/writer over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.bytes_sent = 0

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise EOFError("connection closed")
            buf += chunk
        return bytes(buf)

    def send(self, f: Frame) -> int:
        data = encode_frame(f)
        self.sock.sendall(data)
        self.bytes_sent += len(data)
        return len(data)

    def send_many(self, frames) -> int:
        data = b"".join(encode_frame(f) for f in frames)
        self.sock.sendall(data)
        self.bytes_sent += len(data)
        return len(data)

    def recv(self) -> Frame:
        head = self._recv_exact(HEADER_SIZE)
        kind, rid, br, bc, rows, cols = _parse_header(head)
        rest = self._recv_exact(8 * rows * cols + _CRC.size)
        return decode_frame(head + rest)

    def close(self):
        try:
            self.sock.close()
        except OSError:  # pragma: no cover
            pass
