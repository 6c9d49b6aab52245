"""Partitioning stored blocks over workers, and the resulting vector traffic."""

from __future__ import annotations

from dataclasses import dataclass, field

from nkscale.store.manifest import BlockManifest

IN_MEMORY = "in-memory"
ON_DISK = "on-disk"


@dataclass
class WorkerAssignment:
    worker_id: int
    blocks: set = field(default_factory=set)
    residency: str = IN_MEMORY
    segment_lengths: dict = field(default_factory=dict)
    entries: int = 0

    def tasks(self, manifest: BlockManifest) -> list:
        """Grid-orientation products this worker computes, grouped by block column."""
        return expand_tasks(manifest, self.blocks)


def expand_tasks(manifest: BlockManifest, stored) -> list:
    """Stored coordinates -> virtual (i, j) products; off-diagonal mirrors included."""
    out = set()
    for i, j in stored:
        out.add((i, j))
        if manifest.symmetric and i != j:
            out.add((j, i))
    return sorted(out, key=lambda ij: (ij[1], ij[0]))


def _weight(manifest, ref):
    area = ref.shape[0] * ref.shape[1]
    return 2 * area if manifest.symmetric and ref.block_row != ref.block_col else area


def assign_workers(manifest: BlockManifest, n_workers: int, memory_budget: int | None = None) -> list:
    """Split stored blocks into contiguous column-major runs of near-equal entry count.

    Contiguity in column-major order keeps each worker on few block columns, so
    it needs few vector segments. Off-diagonal blocks of a symmetric store count
    twice, since the owner also computes the mirrored product.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if memory_budget is not None:
        largest = max(8 * r.shape[0] * r.shape[1] for r in manifest.blocks)
        if memory_budget < largest:
            raise ValueError(f"memory budget {memory_budget} B is below one block ({largest} B)")
    refs = sorted(manifest.blocks, key=lambda r: (r.block_col, r.block_row))
    weights = [_weight(manifest, r) for r in refs]
    total = sum(weights)
    out = [WorkerAssignment(w) for w in range(n_workers)]
    cum = 0
    for ref, w in zip(refs, weights):
        k = min(n_workers - 1, int((cum + w / 2) * n_workers / total))
        out[k].blocks.add(ref.coords)
        out[k].entries += w
        cum += w
    for a in out:
        for i, j in a.tasks(manifest):
            c0, c1 = manifest.col_range(j)
            a.segment_lengths[j] = c1 - c0
        stored_bytes = sum(8 * manifest.block(*c).shape[0] * manifest.block(*c).shape[1] for c in a.blocks)
        if memory_budget is not None and stored_bytes > memory_budget:
            a.residency = ON_DISK
    return out


def communication_volume(assignments, n_cols: int, T: int = 1) -> int:
    """Payload bytes of segment pushes for one matvec with T right-hand sides."""
    total = 0
    for a in assignments:
        covered = sum(a.segment_lengths.values())
        if covered > n_cols:
            raise ValueError("assignment covers more columns than the kernel has")
        total += 8 * T * covered
    return total


def broadcast_volume(n_workers: int, n_cols: int, T: int = 1) -> int:
    return n_workers * n_cols * 8 * T
