"""Block manifests: the catalog of kernel sub-blocks and their completion state."""

from __future__ import annotations

import contextlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from filelock import FileLock

MANIFEST_NAME = "manifest.json"
DEFAULT_BLOCK_SIZE = 5000

PENDING = "pending"
COMPLETE = "complete"


@dataclass(slots=True)
class BlockRef:
    block_row: int
    block_col: int
    row_range: tuple
    col_range: tuple
    path: str
    checksum: str | None = None
    status: str = PENDING
    lease_owner: str | None = None
    lease_expiry: float | None = None

    @property
    def shape(self) -> tuple:
        return (self.row_range[1] - self.row_range[0], self.col_range[1] - self.col_range[0])

    @property
    def coords(self) -> tuple:
        return (self.block_row, self.block_col)


@dataclass
class BlockManifest:
    n_rows: int
    n_cols: int
    block_size: int
    symmetric: bool
    blocks: list
    kernel_id: str = ""
    dtype: str = "f64"
    meta: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        self._index = {b.coords: b for b in self.blocks}

    @property
    def grid(self) -> tuple:
        return (math.ceil(self.n_rows / self.block_size), math.ceil(self.n_cols / self.block_size))

    def row_range(self, i: int) -> tuple:
        return (i * self.block_size, min((i + 1) * self.block_size, self.n_rows))

    def col_range(self, j: int) -> tuple:
        return (j * self.block_size, min((j + 1) * self.block_size, self.n_cols))

    def block(self, i: int, j: int) -> BlockRef:
        return self._index[(i, j)]

    def stored_coords(self, i: int, j: int) -> tuple[tuple, bool]:
        """Stored block serving grid position (i, j) and whether it is transposed."""
        if self.symmetric and i > j:
            return (j, i), True
        return (i, j), False

    def pending(self) -> list:
        return [b for b in self.blocks if b.status != COMPLETE]

    @property
    def complete(self) -> bool:
        return all(b.status == COMPLETE for b in self.blocks)

    def block_path(self, ref: BlockRef) -> Path:
        return Path(self.root) / ref.path

    def payload_bytes(self) -> int:
        return sum(8 * b.shape[0] * b.shape[1] for b in self.blocks)

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        d = {
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "block_size": self.block_size,
            "symmetric": self.symmetric,
            "dtype": self.dtype,
            "kernel_id": self.kernel_id,
            "meta": self.meta,
            "blocks": [asdict(b) for b in self.blocks],
        }
        for b in d["blocks"]:
            b["row_range"] = list(b["row_range"])
            b["col_range"] = list(b["col_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "BlockManifest":
        blocks = [
            BlockRef(**{**b, "row_range": tuple(b["row_range"]), "col_range": tuple(b["col_range"])})
            for b in d["blocks"]
        ]
        return cls(
            d["n_rows"], d["n_cols"], d["block_size"], d["symmetric"], blocks,
            d.get("kernel_id", ""), d.get("dtype", "f64"), d.get("meta", {}),
            Path(root) if root is not None else None,
        )

    def save(self, root=None) -> Path:
        root = Path(root or self.root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "blocks").mkdir(exist_ok=True)
        self.root = root
        path = root / MANIFEST_NAME
        tmp = root / f"{MANIFEST_NAME}.tmp.{os.getpid()}"
        tmp.write_text(json.dumps(self.to_dict()))
        os.replace(tmp, path)
        return path


def manifest_path(ref) -> Path:
    p = Path(ref)
    return p / MANIFEST_NAME if p.is_dir() or not p.suffix else p


def load_manifest(ref) -> BlockManifest:
    """Load from a store directory or a manifest file path."""
    path = manifest_path(ref)
    return BlockManifest.from_dict(json.loads(path.read_text()), root=path.parent)


def lock_for(root) -> FileLock:
    return FileLock(str(Path(root) / (MANIFEST_NAME + ".lock")))


@contextlib.contextmanager
def locked_manifest(root):
    """Load the manifest under the store lock and save it on exit."""
    with lock_for(root):
        m = load_manifest(root)
        yield m
        m.save(root)


def plan_blocks(n_rows: int, n_cols: int, block_size: int = DEFAULT_BLOCK_SIZE, symmetric: bool = False,
                kernel_id: str = "") -> BlockManifest:
    """Ceil-division block grid; symmetric manifests list the upper triangle only."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if n_rows < 1 or n_cols < 1:
        raise ValueError("kernel extents must be positive")
    if symmetric and n_rows != n_cols:
        raise ValueError("symmetric manifests need n_rows == n_cols")
    gr, gc = math.ceil(n_rows / block_size), math.ceil(n_cols / block_size)
    blocks = []
    for i in range(gr):
        r = (i * block_size, min((i + 1) * block_size, n_rows))
        for j in range(i if symmetric else 0, gc):
            c = (j * block_size, min((j + 1) * block_size, n_cols))
            blocks.append(BlockRef(i, j, r, c, f"blocks/r{i:05d}_c{j:05d}.nkb"))
    return BlockManifest(n_rows, n_cols, block_size, symmetric, blocks, kernel_id)


def count_blocks(n_rows: int, n_cols: int, block_size: int, symmetric: bool) -> int:
    gr, gc = math.ceil(n_rows / block_size), math.ceil(n_cols / block_size)
    return gr * (gr + 1) // 2 if symmetric else gr * gc


def lease_is_free(ref: BlockRef, owner: str, now: float | None = None) -> bool:
    now = time.time() if now is None else now
    return ref.lease_owner in (None, owner) or (ref.lease_expiry or 0) < now
