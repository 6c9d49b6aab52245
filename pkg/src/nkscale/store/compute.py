"""Block-wise kernel computation with leases and atomic writes."""

from __future__ import annotations

import hashlib
import logging
import multiprocessing as mp
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nkscale.errors import CorruptBlockError
from nkscale.kernels.analytic import compute_kernel_matrix
from nkscale.kernels.layers import ArchSpec
from nkscale.store import blockfile
from nkscale.store.manifest import (
    COMPLETE,
    PENDING,
    BlockManifest,
    BlockRef,
    load_manifest,
    lease_is_free,
    lock_for,
    locked_manifest,
    plan_blocks,
)

log = logging.getLogger(__name__)

DEFAULT_BATCH = 256
LEASE_SECONDS = 600.0


@dataclass
class DataSource:
    """Row and column inputs of a kernel; ``cols=None`` means the same as rows."""

    rows: np.ndarray
    cols: np.ndarray | None = None
    adj_rows: np.ndarray | None = None
    adj_cols: np.ndarray | None = None

    @property
    def symmetric(self) -> bool:
        return self.cols is None

    def col_data(self):
        return (self.rows, self.adj_rows) if self.cols is None else (self.cols, self.adj_cols)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.rows, self.cols, self.adj_rows, self.adj_cols):
            if a is None:
                h.update(b"-")
            else:
                a = np.ascontiguousarray(a, dtype="<f8")
                h.update(str(a.shape).encode())
                h.update(a.tobytes())
        return h.hexdigest()


def kernel_id(arch: ArchSpec, data: DataSource, preprocessing: str = "") -> str:
    h = hashlib.sha256()
    h.update(arch.to_json().encode())
    h.update(preprocessing.encode())
    h.update(data.fingerprint().encode())
    return h.hexdigest()[:32]


def init_store(root, arch: ArchSpec, data: DataSource, block_size=5000, preprocessing: str = "",
               symmetric: bool | None = None) -> BlockManifest:
    """Create (or reopen) a store; an existing store must carry the same kernel id."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    kid = kernel_id(arch, data, preprocessing)
    with lock_for(root):
        if (root / "manifest.json").exists():
            m = load_manifest(root)
            if m.kernel_id != kid:
                raise ValueError(f"store {root} holds kernel {m.kernel_id}, not {kid}")
            return m
        n_rows = len(data.rows)
        n_cols = len(data.col_data()[0])
        sym = data.symmetric if symmetric is None else symmetric
        m = plan_blocks(n_rows, n_cols, block_size, sym, kid)
        m.meta = {"arch": arch.to_dict(), "preprocessing": preprocessing}
        m.save(root)
    return m


def block_is_valid(manifest: BlockManifest, ref: BlockRef) -> bool:
    path = manifest.block_path(ref)
    if not path.exists():
        return False
    try:
        arr, crc = blockfile.read_block_file(path)
    except CorruptBlockError:
        return False
    if arr.shape != ref.shape:
        return False
    return ref.checksum is None or int(ref.checksum, 16) == crc


def _slice(x, a, b):
    return x[a:b]


def compute_block_payload(manifest: BlockManifest, ref: BlockRef, arch: ArchSpec, data: DataSource,
                          batch: int = DEFAULT_BATCH) -> np.ndarray:
    r0, r1 = ref.row_range
    c0, c1 = ref.col_range
    adj_r = None if data.adj_rows is None else _slice(data.adj_rows, r0, r1)
    if manifest.symmetric and ref.block_row == ref.block_col:
        return compute_kernel_matrix(arch, _slice(data.rows, r0, r1), None, adj_r, None, tile=batch)
    cols, adj_cols = data.col_data()
    adj_c = None if adj_cols is None else _slice(adj_cols, c0, c1)
    return compute_kernel_matrix(arch, _slice(data.rows, r0, r1), _slice(cols, c0, c1), adj_r, adj_c, tile=batch)


def compute_block(manifest: BlockManifest, ref: BlockRef, arch: ArchSpec, data: DataSource,
                  batch: int = DEFAULT_BATCH, before_rename=None) -> bool:
    """Compute one block and record it in the manifest. Returns False if it was already valid.

    The payload is written to a temp file and renamed into place, so a crash
    leaves either the old state or a complete block. A block file that exists
    with a valid checksum but was never recorded is adopted without recomputing.
    """
    path = manifest.block_path(ref)
    if ref.status == COMPLETE and block_is_valid(manifest, ref):
        return False
    if path.exists() and block_is_valid(manifest, BlockRef(**{**_ref_dict(ref), "checksum": None})):
        _, crc = blockfile.read_block_file(path)
    else:
        payload = compute_block_payload(manifest, ref, arch, data, batch)
        crc = blockfile.write_block_file(path, payload, before_rename=before_rename)
    _mark_complete(manifest, ref, crc)
    return True


def _ref_dict(ref):
    return {s: getattr(ref, s) for s in BlockRef.__slots__}


def _mark_complete(manifest, ref, crc):
    ref.checksum = f"{crc:016x}"
    ref.status = COMPLETE
    ref.lease_owner = ref.lease_expiry = None
    if manifest.root is None:
        return
    with locked_manifest(manifest.root) as m:
        stored = m.block(*ref.coords)
        stored.checksum, stored.status = ref.checksum, COMPLETE
        stored.lease_owner = stored.lease_expiry = None


def claim_next(root, owner: str, ttl: float = LEASE_SECONDS, block_filter=None):
    """Lease the next pending block for ``owner``; None when nothing is claimable."""
    with locked_manifest(root) as m:
        now = time.time()
        for ref in m.blocks:
            if ref.status == COMPLETE:
                continue
            if block_filter is not None and not block_filter(ref.block_row, ref.block_col):
                continue
            if lease_is_free(ref, owner, now):
                ref.lease_owner, ref.lease_expiry = owner, now + ttl
                return ref.coords
    return None


def work_loop(root, arch: ArchSpec, data: DataSource, owner: str, batch=DEFAULT_BATCH, block_filter=None,
              ttl: float = LEASE_SECONDS, fault=None) -> int:
    """Claim and compute blocks until none are left for this owner; returns the count computed.

    ``fault`` is a test hook ``fault(owner, n_done, tmp_path)`` invoked before each rename.
    """
    done = 0
    while True:
        coords = claim_next(root, owner, ttl, block_filter)
        if coords is None:
            return done
        m = load_manifest(root)
        ref = m.block(*coords)
        hook = None if fault is None else (lambda tmp, n=done: fault(owner, n, tmp))
        if compute_block(m, ref, arch, data, batch, before_rename=hook):
            done += 1


def _worker_entry(root, arch, data, owner, batch, block_filter, ttl, fault):
    try:
        work_loop(root, arch, data, owner, batch, block_filter, ttl, fault)
    except Exception:  # pragma: no cover - surfaced via exit code
        log.exception("worker %s failed", owner)
        os._exit(1)


def compute_kernel(root, arch: ArchSpec, data: DataSource, block_size=5000, workers: int = 1,
                   batch=DEFAULT_BATCH, block_filter=None, preprocessing: str = "", ttl: float = LEASE_SECONDS,
                   fault=None, owner_prefix: str = "w") -> BlockManifest:
    """Compute every pending block of a store with ``workers`` processes."""
    init_store(root, arch, data, block_size, preprocessing)
    if workers <= 1:
        work_loop(root, arch, data, f"{owner_prefix}0", batch, block_filter, ttl, fault)
    else:
        ctx = mp.get_context("fork")
        procs = [
            ctx.Process(target=_worker_entry, args=(root, arch, data, f"{owner_prefix}{k}", batch, block_filter, ttl, fault))
            for k in range(workers)
        ]
        for p in procs:
            p.start()
        for p in procs:
            p.join()
    return load_manifest(root)


def parse_block_filter(spec: str | None):
    """``"i:j"`` selects one block; ``"i:"`` a block row; ``":j"`` a block column."""
    if not spec:
        return None
    a, _, b = spec.partition(":")
    ia = int(a) if a.strip() else None
    ib = int(b) if b.strip() else None
    return lambda i, j: (ia is None or i == ia) and (ib is None or j == ib)


__all__ = [
    "DataSource",
    "PENDING",
    "block_is_valid",
    "claim_next",
    "compute_block",
    "compute_kernel",
    "init_store",
    "kernel_id",
    "parse_block_filter",
    "plan_blocks",
    "work_loop",
]
