from nkscale.kernels.analytic import (
    KernelState,
    activation_transform,
    compute_kernel_matrix,
    conv_affine,
    dense_affine,
    flatten_vectorize,
    global_avg_pool,
    graph_aggregate,
    init_state,
    layer_norm_transform,
    pool_avg,
    propagate,
)
from nkscale.kernels.empirical import empirical_kernel_oracle, empirical_nngp
from nkscale.kernels.layers import PRESETS, ZCA_EPS, ArchSpec, load_arch, preset

__all__ = [
    "ArchSpec",
    "KernelState",
    "PRESETS",
    "ZCA_EPS",
    "activation_transform",
    "compute_kernel_matrix",
    "conv_affine",
    "dense_affine",
    "empirical_kernel_oracle",
    "empirical_nngp",
    "flatten_vectorize",
    "global_avg_pool",
    "graph_aggregate",
    "init_state",
    "layer_norm_transform",
    "load_arch",
    "pool_avg",
    "preset",
    "propagate",
]
