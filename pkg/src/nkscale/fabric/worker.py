"""Stateless block x segment multipliers serving the frame protocol."""

from __future__ import annotations

import logging
import socket
import threading

import numpy as np

from nkscale.fabric.frames import ACK, ERROR, PARTIAL, SEGMENT, Frame, FrameStream, error_frame
from nkscale.store.access import read_block
from nkscale.store.manifest import BlockManifest, load_manifest

log = logging.getLogger(__name__)


class BlockWorker:
    """Multiplies stored blocks by pushed segments.

    With ``in_memory`` the blocks in ``preload`` are read once and kept;
    everything else is read from the shared store on demand.
    """

    def __init__(self, manifest: BlockManifest, in_memory: bool = False, preload=()):
        self.manifest = manifest
        self.in_memory = in_memory
        self._resident = {}
        if in_memory:
            for ij in preload:
                self._resident[ij] = read_block(manifest, *ij)
        self.requests = 0

    def block(self, i, j) -> np.ndarray:
        if (i, j) in self._resident:
            return self._resident[(i, j)]
        arr = read_block(self.manifest, i, j)
        if self.in_memory:
            self._resident[(i, j)] = arr
        return arr

    def handle(self, frames) -> list:
        """Answer one request (its segment pushes, in order) with partial results."""
        segs = {}
        out = []
        for f in frames:
            j = f.block_col
            if f.payload is not None and f.payload.shape[0] > 0:
                segs[j] = f.payload
            elif j not in segs:
                raise ValueError(f"segment {j} reused before it was pushed")
            out.append(Frame(PARTIAL, f.request_id, f.block_row, j, self.block(f.block_row, j) @ segs[j]))
        self.requests += 1
        return out


def serve_connection(sock: socket.socket, worker: BlockWorker, fail_on_request: int | None = None):
    """Serve requests on one connection until the peer closes it.

    ``fail_on_request`` simulates a crash: the connection is dropped after
    receiving that (0-based) request, without replying.
    """
    stream = FrameStream(sock)
    served = 0
    try:
        while True:
            pending = []
            rid = None
            while True:
                f = stream.recv()
                rid = f.request_id
                if f.kind == ACK:
                    break
                if f.kind != SEGMENT:
                    raise ValueError(f"unexpected frame kind {f.kind} from host")
                pending.append(f)
            if fail_on_request is not None and served == fail_on_request:
                sock.shutdown(socket.SHUT_RDWR)
                return
            try:
                replies = worker.handle(pending)
            except Exception as exc:  # reported to the host, connection stays up
                stream.send(error_frame(rid, f"{type(exc).__name__}: {exc}"))
                continue
            stream.send_many(replies + [Frame(ACK, rid)])
            served += 1
    except (EOFError, OSError):
        pass
    finally:
        stream.close()


def parse_addr(addr: str) -> tuple:
    host, _, port = addr.rpartition(":")
    return (host or "127.0.0.1", int(port))


def serve_tcp(addr: str, store_dir, in_memory: bool = False, ready=None, stop: threading.Event | None = None):
    """Listen on ``addr`` (``host:port``; port 0 picks one) and serve each connection in a thread.

    ``ready`` is called with the bound ``host:port`` once listening.
    """
    manifest = load_manifest(store_dir)
    worker = BlockWorker(manifest, in_memory)
    srv = socket.create_server(parse_addr(addr))
    srv.settimeout(0.5)
    host, port = srv.getsockname()[:2]
    if ready is not None:
        ready(f"{host}:{port}")
    try:
        while stop is None or not stop.is_set():
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(None)
            threading.Thread(target=serve_connection, args=(conn, worker), daemon=True).start()
    finally:
        srv.close()


__all__ = ["BlockWorker", "ERROR", "parse_addr", "serve_connection", "serve_tcp"]
