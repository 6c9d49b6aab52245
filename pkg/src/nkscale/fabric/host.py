"""Host side of the matvec fabric: segment pushes, partial collection, re-dispatch."""

from __future__ import annotations

import itertools
import logging
import socket
import subprocess
import sys
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from nkscale.errors import DimensionError, IncompleteKernelError, WorkerFailure
from nkscale.fabric.assign import IN_MEMORY, assign_workers, expand_tasks
from nkscale.fabric.frames import ACK, ERROR, PARTIAL, SEGMENT, Frame, FrameStream
from nkscale.fabric.worker import BlockWorker, parse_addr, serve_connection
from nkscale.store.access import reduce_row
from nkscale.store.manifest import BlockManifest

log = logging.getLogger(__name__)


class Fabric:
    """Distributed ``y = K v`` over a block store.

    Each worker gets only the vector segments its blocks touch. Partial
    products come back per block and are summed on the host in fixed column
    order, so results do not depend on worker count, backend, or failures.
    When a worker fails its outstanding blocks are sent to the survivors
    (all workers share the store) under the same request id; duplicate
    partials are dropped.
    """

    def __init__(self, manifest: BlockManifest, assignments, streams: dict, max_retries: int = 3,
                 owned_threads=(), owned_procs=()):
        if not manifest.complete:
            raise IncompleteKernelError(f"{len(manifest.pending())} blocks pending")
        self.manifest = manifest
        self.assignments = assignments
        self.streams = dict(streams)
        self.tasks = {a.worker_id: a.tasks(manifest) for a in assignments if a.worker_id in streams}
        self.max_retries = max_retries
        self.dead = set()
        self.duplicates = 0
        self.redispatched = 0
        self.last_segment_bytes = 0
        self._ids = itertools.count(1)
        self._threads = list(owned_threads)
        self._procs = list(owned_procs)
        expected = set(expand_tasks(manifest, [r.coords for r in manifest.blocks]))
        covered = set().union(*self.tasks.values()) if self.tasks else set()
        if covered != expected:
            raise ValueError("assignments do not cover every block")

    # ------------------------------------------------------------ backends

    @classmethod
    def threads(cls, manifest, n_workers: int, memory_budget=None, fail_on_request: dict | None = None,
                **kw) -> "Fabric":
        """In-process workers on socket pairs (same frames as TCP)."""
        assignments = assign_workers(manifest, n_workers, memory_budget)
        fail_on_request = fail_on_request or {}
        streams, threads = {}, []
        for a in assignments:
            if not a.blocks:
                continue
            host_sock, worker_sock = socket.socketpair()
            worker = BlockWorker(manifest, a.residency == IN_MEMORY, a.tasks(manifest))
            t = threading.Thread(
                target=serve_connection, args=(worker_sock, worker, fail_on_request.get(a.worker_id)), daemon=True
            )
            t.start()
            streams[a.worker_id] = FrameStream(host_sock)
            threads.append(t)
        return cls(manifest, assignments, streams, owned_threads=threads, **kw)

    @classmethod
    def tcp(cls, manifest, addrs, memory_budget=None, timeout: float = 120.0, procs=(), **kw) -> "Fabric":
        """Connect to running ``worker`` processes at ``host:port`` addresses."""
        assignments = assign_workers(manifest, len(addrs), memory_budget)
        streams = {}
        for a, addr in zip(assignments, addrs):
            if not a.blocks:
                continue
            s = socket.create_connection(parse_addr(addr), timeout=timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            streams[a.worker_id] = FrameStream(s)
        return cls(manifest, assignments, streams, owned_procs=procs, **kw)

    # ------------------------------------------------------------ protocol

    def _frames(self, rid, tasks, v):
        frames, sent, pushed = [], set(), 0
        for i, j in tasks:
            if j in sent:
                seg = np.zeros((0, v.shape[1]))
            else:
                c0, c1 = self.manifest.col_range(j)
                seg = v[c0:c1]
                sent.add(j)
                pushed += seg.size * 8
            frames.append(Frame(SEGMENT, rid, i, j, seg))
        frames.append(Frame(ACK, rid))
        return frames, pushed

    def _exchange(self, wid, rid, tasks, v):
        stream = self.streams[wid]
        frames, pushed = self._frames(rid, tasks, v)
        stream.send_many(frames)
        got = []
        while True:
            f = stream.recv()
            if f.request_id != rid:
                continue
            if f.kind == ACK:
                return got, pushed
            if f.kind == ERROR:
                raise WorkerFailure(f"worker {wid}: {f.message()}")
            if f.kind == PARTIAL:
                got.append(f)

    def matvec(self, v) -> np.ndarray:
        m = self.manifest
        v = np.asarray(v, dtype=np.float64)
        single = v.ndim == 1
        v = v.reshape(v.shape[0], -1)
        if v.shape[0] != m.n_cols:
            raise DimensionError(f"vector length {v.shape[0]} != kernel columns {m.n_cols}")
        rid = next(self._ids)
        partials = {}
        todo = {w: t for w, t in self.tasks.items() if t}
        pushed = 0
        errors = []
        for attempt in range(self.max_retries + 1):
            failed = []
            with ThreadPoolExecutor(max(1, len(todo))) as pool:
                futs = {w: pool.submit(self._exchange, w, rid, t, v) for w, t in todo.items()}
                for w in sorted(futs):
                    try:
                        frames, nbytes = futs[w].result()
                    except (OSError, EOFError, WorkerFailure, ValueError) as exc:
                        log.warning("worker %d failed on request %d: %s", w, rid, exc)
                        errors.append(f"worker {w}: {exc}")
                        failed.append(w)
                        continue
                    pushed += nbytes
                    for f in frames:
                        if f.coords in partials:
                            self.duplicates += 1
                        else:
                            partials[f.coords] = f.payload
            if not failed:
                break
            todo = self._redispatch(failed, partials)
            if not todo:
                break
        missing = [ij for t in self.tasks.values() for ij in t if ij not in partials]
        if missing:
            raise WorkerFailure(f"request {rid}: {len(missing)} blocks unserved; " + "; ".join(errors[-3:]))
        self.last_segment_bytes = pushed
        gr, gc = m.grid
        y = np.empty((m.n_rows, v.shape[1]))
        for i in range(gr):
            r0, r1 = m.row_range(i)
            y[r0:r1] = reduce_row(partials, i, gc, (r1 - r0, v.shape[1]))
        return y[:, 0] if single else y

    def _redispatch(self, failed, partials) -> dict:
        orphans = []
        for w in failed:
            self.dead.add(w)
            stream = self.streams.pop(w, None)
            if stream is not None:
                stream.close()
            orphans.extend(self.tasks.pop(w, []))
        alive = sorted(self.streams)
        if not alive:
            return {}
        todo = {}
        for k, ij in enumerate(sorted(orphans, key=lambda ij: (ij[1], ij[0]))):
            w = alive[k % len(alive)]
            self.tasks[w].append(ij)
            if ij not in partials:
                todo.setdefault(w, []).append(ij)
        for w in alive:
            self.tasks[w].sort(key=lambda ij: (ij[1], ij[0]))
            if w in todo:
                todo[w].sort(key=lambda ij: (ij[1], ij[0]))
        self.redispatched += len(orphans)
        return todo

    def __call__(self, v):
        return self.matvec(v)

    def kill_worker_process(self, k: int):
        """Terminate the k-th owned worker process (failure injection)."""
        p = self._procs[k]
        p.kill()
        p.wait()

    def close(self):
        for s in self.streams.values():
            s.close()
        self.streams.clear()
        for p in self._procs:
            if p.poll() is None:
                p.terminate()
                try:
                    p.wait(timeout=5)
                except subprocess.TimeoutExpired:  # pragma: no cover
                    p.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def spawn_workers(store_dir, n: int, in_memory: bool = False, host: str = "127.0.0.1"):
    """Start ``n`` local worker processes on free ports; returns (addresses, processes)."""
    procs, addrs = [], []
    for _ in range(n):
        cmd = [sys.executable, "-m", "nkscale", "worker", "--listen", f"{host}:0", "--blocks", str(store_dir)]
        if in_memory:
            cmd.append("--in-memory")
        p = subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True)
        line = p.stdout.readline().strip()
        if not line.startswith("listening on "):
            p.kill()
            raise WorkerFailure(f"worker did not start: {line!r}")
        addrs.append(line.split()[-1])
        procs.append(p)
    return addrs, procs


def tcp_fabric(store_manifest, n_workers: int, memory_budget=None, in_memory=False, **kw) -> Fabric:
    addrs, procs = spawn_workers(store_manifest.root, n_workers, in_memory)
    return Fabric.tcp(store_manifest, addrs, memory_budget, procs=procs, **kw)
