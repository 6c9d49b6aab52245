"""Block-sharded kernel storage."""

from nkscale.store.access import (
    StoreKernel,
    assemble,
    assemble_prefix,
    matvec_from_store,
    read_block,
    reduce_row,
)
from nkscale.store.compute import (
    DataSource,
    claim_next,
    compute_block,
    compute_kernel,
    init_store,
    kernel_id,
    parse_block_filter,
    work_loop,
)
from nkscale.store.manifest import BlockManifest, BlockRef, count_blocks, load_manifest, plan_blocks

__all__ = [
    "BlockManifest",
    "BlockRef",
    "DataSource",
    "StoreKernel",
    "assemble",
    "assemble_prefix",
    "claim_next",
    "compute_block",
    "compute_kernel",
    "count_blocks",
    "init_store",
    "kernel_id",
    "load_manifest",
    "matvec_from_store",
    "parse_block_filter",
    "plan_blocks",
    "read_block",
    "reduce_row",
    "work_loop",
]
