"""Reading blocks back: verified reads, streamed matvecs, and row/diagonal accessors."""

from __future__ import annotations

import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from nkscale.errors import CorruptBlockError, DimensionError, IncompleteKernelError
from nkscale.store import blockfile
from nkscale.store.manifest import COMPLETE, BlockManifest


def default_threads() -> int:
    return max(1, int(os.environ.get("NK_THREADS", os.cpu_count() or 1)))


def read_stored_block(manifest: BlockManifest, i: int, j: int) -> np.ndarray:
    ref = manifest.block(i, j)
    if ref.status != COMPLETE:
        raise IncompleteKernelError(f"block ({i}, {j}) is {ref.status}")
    arr, crc = blockfile.read_block_file(manifest.block_path(ref))
    if ref.checksum is not None and int(ref.checksum, 16) != crc:
        raise CorruptBlockError(f"block ({i}, {j}): checksum differs from manifest")
    if arr.shape != ref.shape:
        raise CorruptBlockError(f"block ({i}, {j}): shape {arr.shape} != {ref.shape}")
    return arr


def read_block(manifest: BlockManifest, i: int, j: int) -> np.ndarray:
    """Dense, C-contiguous block at grid position (i, j); mirrors are served transposed."""
    (si, sj), transposed = manifest.stored_coords(i, j)
    arr = read_stored_block(manifest, si, sj)
    return np.ascontiguousarray(arr.T) if transposed else arr


def grid_blocks(manifest: BlockManifest):
    """All full-grid coordinates, including mirrors of a symmetric store."""
    gr, gc = manifest.grid
    return [(i, j) for i in range(gr) for j in range(gc)]


def reduce_row(partials: dict, i: int, n_cols_blocks: int, shape) -> np.ndarray:
    """Sum per-block partials of row-block ``i`` in increasing column order."""
    acc = np.zeros(shape)
    for j in range(n_cols_blocks):
        p = partials.get((i, j))
        if p is not None:
            acc = acc + p
    return acc


def _as_multi(v, n):
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v = v.reshape(v.shape[0], -1)
    if v.shape[0] != n:
        raise DimensionError(f"vector length {v.shape[0]} != kernel columns {n}")
    return v, single


def matvec_from_store(manifest: BlockManifest, v, readers: int | None = None) -> np.ndarray:
    """``K @ v`` streamed block by block; ``v`` is (n_cols,) or (n_cols, T)."""
    if not manifest.complete:
        raise IncompleteKernelError(f"{len(manifest.pending())} blocks pending")
    v, single = _as_multi(v, manifest.n_cols)
    gr, gc = manifest.grid
    readers = readers or default_threads()

    def partial(ij):
        i, j = ij
        c0, c1 = manifest.col_range(j)
        return ij, read_block(manifest, i, j) @ v[c0:c1]

    y = np.empty((manifest.n_rows, v.shape[1]))
    with ThreadPoolExecutor(readers) as pool:
        for i in range(gr):
            parts = dict(pool.map(partial, [(i, j) for j in range(gc)]))
            r0, r1 = manifest.row_range(i)
            y[r0:r1] = reduce_row(parts, i, gc, (r1 - r0, v.shape[1]))
    return y[:, 0] if single else y


def assemble(manifest: BlockManifest) -> np.ndarray:
    """The full kernel as one dense array (desk-scale use)."""
    out = np.empty((manifest.n_rows, manifest.n_cols))
    for i, j in grid_blocks(manifest):
        r0, r1 = manifest.row_range(i)
        c0, c1 = manifest.col_range(j)
        out[r0:r1, c0:c1] = read_block(manifest, i, j)
    return out


def assemble_prefix(manifest: BlockManifest, n_rows: int, n_cols: int) -> np.ndarray:
    """Leading ``n_rows x n_cols`` corner, touching only the blocks it overlaps."""
    bs = manifest.block_size
    out = np.empty((n_rows, n_cols))
    for i in range(-(-n_rows // bs)):
        for j in range(-(-n_cols // bs)):
            r0, r1 = manifest.row_range(i)
            c0, c1 = manifest.col_range(j)
            r1, c1 = min(r1, n_rows), min(c1, n_cols)
            out[r0:r1, c0:c1] = read_block(manifest, i, j)[: r1 - r0, : c1 - c0]
    return out


class StoreKernel:
    """Row and diagonal access into a stored kernel with a small block cache."""

    def __init__(self, manifest: BlockManifest, cache_blocks: int = 16):
        self.manifest = manifest
        self.cache_blocks = cache_blocks
        self._cache = OrderedDict()

    @property
    def shape(self):
        return (self.manifest.n_rows, self.manifest.n_cols)

    def _block(self, i, j):
        key = (i, j)
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        arr = read_block(self.manifest, i, j)
        self._cache[key] = arr
        while len(self._cache) > self.cache_blocks:
            self._cache.popitem(last=False)
        return arr

    def row(self, r: int) -> np.ndarray:
        m = self.manifest
        i, off = divmod(r, m.block_size)
        return np.concatenate([self._block(i, j)[off] for j in range(m.grid[1])])

    def sub(self, rows, cols) -> np.ndarray:
        """Submatrix at arbitrary row and column indices."""
        rows, cols = np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)
        bs = self.manifest.block_size
        out = np.empty((rows.size, cols.size))
        rb, cb = rows // bs, cols // bs
        for i in np.unique(rb):
            ri = np.flatnonzero(rb == i)
            for j in np.unique(cb):
                cj = np.flatnonzero(cb == j)
                blk = self._block(int(i), int(j))
                out[np.ix_(ri, cj)] = blk[np.ix_(rows[ri] - i * bs, cols[cj] - j * bs)]
        return out

    def diag(self) -> np.ndarray:
        m = self.manifest
        out = np.empty(min(m.n_rows, m.n_cols))
        for i in range(min(m.grid)):
            r0, r1 = m.row_range(i)
            c0, c1 = m.col_range(i)
            n = min(r1, c1) - r0
            out[r0:r0 + n] = np.diagonal(self._block(i, i))[:n]
        return out

    def matvec(self, v):
        return matvec_from_store(self.manifest, v)
