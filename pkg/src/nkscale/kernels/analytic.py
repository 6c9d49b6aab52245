"""Closed-form NNGP / NTK propagation through compositional architectures.

A :class:`KernelState` holds the covariances between two *batches* of inputs.
With ``full=True`` the cross covariance has shape ``(N1, N2, *S1, *S2)`` and
the self covariances ``(N, *S, *S)``; with ``full=False`` only matching pixel
pairs are kept, ``(N1, N2, *S)`` and ``(N, *S)``.  After global pooling or
flattening the state is scalar: ``(N1, N2)`` and ``(N,)``.

Every operation is a pure function returning a new state.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from nkscale.errors import DimensionError, NumericDomainError
from nkscale.kernels import layers as L

CS_SLACK = 1e-9


@dataclass(frozen=True)
class KernelState:
    cross: np.ndarray
    ntk: np.ndarray
    self1: np.ndarray
    self2: np.ndarray
    shape1: tuple
    shape2: tuple
    full: bool = True

    @property
    def ndim(self) -> int:
        return len(self.shape1)

    @property
    def is_scalar(self) -> bool:
        return self.ndim == 0

    def diag1(self) -> np.ndarray:
        return _self_diag(self.self1, self.shape1, self.full)

    def diag2(self) -> np.ndarray:
        return _self_diag(self.self2, self.shape2, self.full)


def _self_diag(s, shape, full):
    """Per-position variances ``(N, *S)`` from a self-covariance array."""
    if not shape or not full:
        return s
    n, p = s.shape[0], math.prod(shape)
    return np.diagonal(s.reshape(n, p, p), axis1=1, axis2=2).reshape((n,) + shape)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise DimensionError("inputs need shape (N, *spatial, C)")
    return x


# ----------------------------------------------------------------- init


def init_state(x1, x2=None, full: bool = True) -> KernelState:
    """Input Gram ``(1/C) sum_c x1[p,c] x2[q,c]`` with a zero NTK."""
    x1 = _as_batch(x1)
    x2 = x1 if x2 is None else _as_batch(x2)
    c = x1.shape[-1]
    if x2.shape[-1] != c:
        raise DimensionError(f"channel mismatch: {c} vs {x2.shape[-1]}")
    s1, s2 = x1.shape[1:-1], x2.shape[1:-1]
    if len(s1) != len(s2):
        raise DimensionError("inputs have different spatial ranks")
    k = len(s1)
    if not full and s1 != s2:
        raise DimensionError("diagonal tracking requires equal spatial shapes")
    n1, n2 = x1.shape[0], x2.shape[0]
    f1 = x1.reshape(n1, -1, c)
    f2 = x2.reshape(n2, -1, c)
    if k == 0 or full:
        cross = np.einsum("apc,bqc->abpq", f1, f2, optimize=True) / c
        cross = cross.reshape((n1, n2) + s1 + s2)
        self1 = (np.einsum("apc,aqc->apq", f1, f1) / c).reshape((n1,) + s1 + s1)
        self2 = (np.einsum("apc,aqc->apq", f2, f2) / c).reshape((n2,) + s2 + s2)
        if k == 0:
            self1, self2 = self1.reshape(n1), self2.reshape(n2)
    else:
        cross = (np.einsum("apc,bpc->abp", f1, f2, optimize=True) / c).reshape((n1, n2) + s1)
        self1 = (np.einsum("apc,apc->ap", f1, f1) / c).reshape((n1,) + s1)
        self2 = (np.einsum("apc,apc->ap", f2, f2) / c).reshape((n2,) + s2)
    return KernelState(cross, np.zeros_like(cross), self1, self2, tuple(s1), tuple(s2), full or k == 0)


# ----------------------------------------------------------------- affine


def dense_affine(state: KernelState, w_var: float, b_var: float) -> KernelState:
    cross = w_var * state.cross + b_var
    return replace(
        state,
        cross=cross,
        ntk=w_var * state.ntk + cross,
        self1=w_var * state.self1 + b_var,
        self2=w_var * state.self2 + b_var,
    )


def _spatial_groups(state: KernelState, which: str):
    """Axis groups holding spatial indices for the cross or a self array."""
    k = state.ndim
    lead = 2 if which == "cross" else 1
    if state.full:
        return [tuple(range(lead, lead + k)), tuple(range(lead + k, lead + 2 * k))]
    return [tuple(range(lead, lead + k))]


def _shift_sum(arr: np.ndarray, groups, filter_shape) -> np.ndarray:
    """Mean over filter offsets of ``arr[p + d, q + d]`` with zero padding.

    The same offset is applied to every group. Offsets are ``k - floor(F/2)``.
    """
    pads = [(0, 0)] * arr.ndim
    for g in groups:
        for ax, f in zip(g, filter_shape):
            a = f // 2
            pads[ax] = (a, f - 1 - a)
    padded = np.pad(arr, pads)
    out = np.zeros_like(arr)
    for offs in itertools.product(*(range(f) for f in filter_shape)):
        idx = [slice(None)] * arr.ndim
        for g in groups:
            for ax, o in zip(g, offs):
                idx[ax] = slice(o, o + arr.shape[ax])
        out += padded[tuple(idx)]
    return out / math.prod(filter_shape)


def conv_affine(state: KernelState, w_var: float, b_var: float, filter_shape, padding="SAME") -> KernelState:
    filter_shape = tuple(int(f) for f in filter_shape)
    if padding != "SAME":
        raise ValueError("only SAME padding is supported")
    if state.is_scalar:
        raise DimensionError("conv_affine needs a spatial state")
    if len(filter_shape) != state.ndim:
        raise DimensionError(f"filter rank {len(filter_shape)} != spatial rank {state.ndim}")

    def conv(arr, which):
        return _shift_sum(arr, _spatial_groups(state, which), filter_shape)

    cross = w_var * conv(state.cross, "cross") + b_var
    return replace(
        state,
        cross=cross,
        ntk=w_var * conv(state.ntk, "cross") + cross,
        self1=w_var * conv(state.self1, "self") + b_var,
        self2=w_var * conv(state.self2, "self") + b_var,
    )


# ----------------------------------------------------------------- activations


def _dual(kind: str, s12, s11, s22):
    """Return (Sigma', Sigma-dot') for one activation kind."""
    if kind == "identity":
        return s12, np.ones_like(s12)
    if kind == "erf":
        a = (1 + 2 * s11) * (1 + 2 * s22)
        arg = np.clip(2 * s12 / np.sqrt(a), -1.0, 1.0)
        return (2 / np.pi) * np.arcsin(arg), (4 / np.pi) / np.sqrt(np.maximum(a - 4 * s12**2, 1e-300))
    prod = np.sqrt(s11 * s22)
    c = np.clip(s12 / prod, -1.0, 1.0)
    if kind == "relu":
        theta = np.arccos(c)
        return prod / (2 * np.pi) * (np.sin(theta) + (np.pi - theta) * c), (np.pi - theta) / (2 * np.pi)
    if kind == "exp_normalized":
        e = np.exp(c - 1)
        return prod * e, e
    raise ValueError(f"unknown activation {kind!r}")


def _check_positive(var, label):
    if var.size and not np.all(var > 0):
        bad = np.argwhere(~(var > 0))[0]
        raise NumericDomainError(f"nonpositive self-variance in {label} at index {tuple(int(i) for i in bad)}")


def _broadcast_vars(state: KernelState):
    """Per-position variances shaped to broadcast against the cross array."""
    d1, d2 = state.diag1(), state.diag2()
    n1, n2, k = d1.shape[0], d2.shape[0], state.ndim
    if state.full:
        v1 = d1.reshape((n1, 1) + state.shape1 + (1,) * k)
        v2 = d2.reshape((1, n2) + (1,) * k + state.shape2)
    else:
        v1 = d1.reshape((n1, 1) + state.shape1)
        v2 = d2.reshape((1, n2) + state.shape2)
    return v1, v2


def _self_transform(kind, s, shape, full):
    if shape and full:
        d = _self_diag(s, shape, full)
        n, k = d.shape[0], len(shape)
        v1 = d.reshape((n,) + shape + (1,) * k)
        v2 = d.reshape((n,) + (1,) * k + shape)
        out, _ = _dual(kind, s, v1, v2)
        return out
    out, _ = _dual(kind, s, s, s)
    return out


def activation_transform(state: KernelState, kind: str) -> KernelState:
    if kind not in L.ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    if kind == "identity":
        return state
    _check_positive(state.diag1(), "input 1")
    _check_positive(state.diag2(), "input 2")
    v1, v2 = _broadcast_vars(state)
    cross, dot = _dual(kind, state.cross, v1, v2)
    return replace(
        state,
        cross=cross,
        ntk=state.ntk * dot,
        self1=_self_transform(kind, state.self1, state.shape1, state.full),
        self2=_self_transform(kind, state.self2, state.shape2, state.full),
    )


# ----------------------------------------------------------------- pooling


def _pool_axes(arr, axes, window, strides):
    for ax, w, s in zip(axes, window, strides):
        size = arr.shape[ax]
        n_out = (size - w) // s + 1
        if n_out < 1:
            raise DimensionError(f"pool window {w} larger than extent {size}")
        parts = []
        for o in range(w):
            idx = [slice(None)] * arr.ndim
            idx[ax] = slice(o, o + s * (n_out - 1) + 1, s)
            parts.append(arr[tuple(idx)])
        arr = sum(parts) / w
    return arr


def _pooled_shape(shape, window, strides):
    return tuple((n - w) // s + 1 for n, w, s in zip(shape, window, strides))


def _require_full(state, op):
    if not state.full:
        raise DimensionError(f"{op} requires full covariance tracking")


def pool_avg(state: KernelState, window, strides=None) -> KernelState:
    window = tuple(int(w) for w in window)
    strides = window if strides is None else tuple(int(s) for s in strides)
    if state.is_scalar:
        raise DimensionError("pool_avg needs a spatial state")
    if len(window) != state.ndim:
        raise DimensionError("window rank does not match spatial rank")
    _require_full(state, "pool_avg")

    def pool(arr, which):
        for g in _spatial_groups(state, which):
            arr = _pool_axes(arr, g, window, strides)
        return arr

    return replace(
        state,
        cross=pool(state.cross, "cross"),
        ntk=pool(state.ntk, "cross"),
        self1=pool(state.self1, "self"),
        self2=pool(state.self2, "self"),
        shape1=_pooled_shape(state.shape1, window, strides),
        shape2=_pooled_shape(state.shape2, window, strides),
    )


def global_avg_pool(state: KernelState) -> KernelState:
    if state.is_scalar:
        return state
    _require_full(state, "global_avg_pool")
    k = state.ndim

    def gap(arr, lead):
        return arr.mean(axis=tuple(range(lead, lead + 2 * k)))

    return KernelState(
        gap(state.cross, 2), gap(state.ntk, 2), gap(state.self1, 1), gap(state.self2, 1), (), (), True
    )


def _diag_mean(arr, lead, shape):
    p = math.prod(shape)
    flat = arr.reshape(arr.shape[:lead] + (p, p))
    return np.diagonal(flat, axis1=-2, axis2=-1).mean(axis=-1)


def flatten_vectorize(state: KernelState) -> KernelState:
    if state.is_scalar:
        return state
    k = state.ndim
    if state.full:
        if state.shape1 != state.shape2:
            raise DimensionError("flatten needs equal spatial shapes")
        cross = _diag_mean(state.cross, 2, state.shape1)
        ntk = _diag_mean(state.ntk, 2, state.shape1)
        self1 = _diag_mean(state.self1, 1, state.shape1)
        self2 = _diag_mean(state.self2, 1, state.shape2)
    else:
        cross = state.cross.mean(axis=tuple(range(2, 2 + k)))
        ntk = state.ntk.mean(axis=tuple(range(2, 2 + k)))
        self1 = state.self1.mean(axis=tuple(range(1, 1 + k)))
        self2 = state.self2.mean(axis=tuple(range(1, 1 + k)))
    return KernelState(cross, ntk, self1, self2, (), (), True)


# ----------------------------------------------------------------- normalization


def layer_norm_transform(state: KernelState, include_spatial: bool = False) -> KernelState:
    d1, d2 = state.diag1(), state.diag2()
    if include_spatial and not state.is_scalar:
        k = state.ndim
        m1 = d1.mean(axis=tuple(range(1, 1 + k)))
        m2 = d2.mean(axis=tuple(range(1, 1 + k)))
        _check_positive(m1, "input 1")
        _check_positive(m2, "input 2")
        denom = np.sqrt(m1[:, None] * m2[None, :]).reshape(m1.shape + m2.shape + (1,) * (state.cross.ndim - 2))
        s1 = m1.reshape(m1.shape + (1,) * (state.self1.ndim - 1))
        s2 = m2.reshape(m2.shape + (1,) * (state.self2.ndim - 1))
        return replace(
            state, cross=state.cross / denom, ntk=state.ntk / denom, self1=state.self1 / s1, self2=state.self2 / s2
        )
    _check_positive(d1, "input 1")
    _check_positive(d2, "input 2")
    v1, v2 = _broadcast_vars(state)
    denom = np.sqrt(v1 * v2)

    def norm_self(s, d, shape):
        if shape and state.full:
            n, k = d.shape[0], len(shape)
            return s / np.sqrt(d.reshape((n,) + shape + (1,) * k) * d.reshape((n,) + (1,) * k + shape))
        return np.ones_like(s)

    return replace(
        state,
        cross=state.cross / denom,
        ntk=state.ntk / denom,
        self1=norm_self(state.self1, d1, state.shape1),
        self2=norm_self(state.self2, d2, state.shape2),
    )


# ----------------------------------------------------------------- graphs


def _with_loops(adj, n_nodes, self_loops, label):
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim == 2:
        adj = adj[None]
    if adj.shape[1:] != (n_nodes, n_nodes):
        raise DimensionError(f"adjacency {label} has shape {adj.shape[1:]}, expected {(n_nodes, n_nodes)}")
    if self_loops:
        adj = adj + np.eye(n_nodes)
    return adj


def graph_aggregate(state: KernelState, adj1, adj2, self_loops: bool = True) -> KernelState:
    if state.ndim != 1:
        raise DimensionError("graph_aggregate needs a node-indexed (1D) state")
    _require_full(state, "graph_aggregate")
    a1 = _with_loops(adj1, state.shape1[0], self_loops, "1")
    a2 = _with_loops(adj2, state.shape2[0], self_loops, "2")
    n1, n2 = state.cross.shape[:2]
    if a1.shape[0] not in (1, n1) or a2.shape[0] not in (1, n2):
        raise DimensionError("adjacency batch size does not match the state")
    a1 = np.broadcast_to(a1, (n1,) + a1.shape[1:])
    a2 = np.broadcast_to(a2, (n2,) + a2.shape[1:])

    def cross_agg(c):
        return np.einsum("aip,abpq,bjq->abij", a1, c, a2, optimize=True)

    return replace(
        state,
        cross=cross_agg(state.cross),
        ntk=cross_agg(state.ntk),
        self1=np.einsum("aip,apq,ajq->aij", a1, state.self1, a1, optimize=True),
        self2=np.einsum("aip,apq,ajq->aij", a2, state.self2, a2, optimize=True),
    )


# ----------------------------------------------------------------- checks


def cauchy_schwarz_violation(state: KernelState) -> float:
    """Largest ``cross^2 - var1*var2`` (positive means violated)."""
    v1, v2 = _broadcast_vars(state)
    return float(np.max(state.cross**2 - v1 * v2 * (1 + CS_SLACK) - CS_SLACK))


# ----------------------------------------------------------------- driver


def apply_layer(state: KernelState, layer, adj1=None, adj2=None) -> KernelState:
    if isinstance(layer, L.DenseAffine):
        return dense_affine(state, layer.w_var, layer.b_var)
    if isinstance(layer, L.ConvAffine):
        return conv_affine(state, layer.w_var, layer.b_var, layer.filter_shape, layer.padding)
    if isinstance(layer, L.Activation):
        return activation_transform(state, layer.kind)
    if isinstance(layer, L.AvgPool):
        return pool_avg(state, layer.window, layer.strides)
    if isinstance(layer, L.GlobalAvgPool):
        return global_avg_pool(state)
    if isinstance(layer, L.Flatten):
        return flatten_vectorize(state)
    if isinstance(layer, L.LayerNorm):
        return layer_norm_transform(state, layer.include_spatial)
    if isinstance(layer, L.GraphAggregate):
        if adj1 is None or adj2 is None:
            raise DimensionError("graph_aggregate needs adjacency matrices")
        return graph_aggregate(state, adj1, adj2, layer.self_loops)
    raise TypeError(f"unsupported layer {layer!r}")


def propagate(arch: L.ArchSpec, x1, x2=None, adj1=None, adj2=None, full: bool | None = None) -> KernelState:
    """Run every layer of ``arch`` on a batch pair and return the final state."""
    if full is None:
        full = arch.needs_full_covariance
    if x2 is None:
        x2, adj2 = x1, adj1
    state = init_state(x1, x2, full=full)
    for layer in arch.layers:
        state = apply_layer(state, layer, adj1, adj2)
    return state


def _tile(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _default_tile(x, full):
    per_pair = math.prod(x.shape[1:-1]) ** (2 if full else 1)
    # ~32M doubles per cross array keeps a tile under a few hundred MB
    return max(1, int(math.sqrt(32_000_000 / max(per_pair, 1))))


def _pair_kernel(arch, x1, x2, a1, a2, full, both):
    st = propagate(arch, x1, x2, a1, a2, full=full)
    if both:
        return st.cross, st.ntk
    return st.ntk if arch.kernel_kind == "ntk" else st.cross


def compute_kernel_matrix(
    arch: L.ArchSpec,
    x1,
    x2=None,
    adj1=None,
    adj2=None,
    tile: int | None = None,
    full: bool | None = None,
    both: bool = False,
):
    """Dense kernel between two batches.

    ``x`` has shape ``(N, *spatial, C)``; for graph architectures it may also be
    a list of ``(nodes_i, C)`` arrays with a matching list of adjacencies, and
    graphs are grouped by node count. With ``x2=None`` the result is exactly
    symmetric. ``both=True`` returns ``(nngp, ntk)``.
    """
    symmetric = x2 is None
    if symmetric:
        x2, adj2 = x1, adj1
    if full is None:
        full = arch.needs_full_covariance
    if arch.has_graph:
        return _graph_kernel(arch, x1, x2, adj1, adj2, symmetric, full, both)
    x1, x2 = _as_batch(x1), _as_batch(x2)
    n1, n2 = x1.shape[0], x2.shape[0]
    tile = tile or _default_tile(x1, full)
    outs = [np.empty((n1, n2)) for _ in range(2 if both else 1)]
    for r0, r1 in _tile(n1, tile):
        for c0, c1 in _tile(n2, tile):
            if symmetric and c1 <= r0:
                continue
            try:
                res = _pair_kernel(arch, x1[r0:r1], x2[c0:c1], None, None, full, both)
            except NumericDomainError as exc:
                raise NumericDomainError(f"rows {r0}:{r1}, cols {c0}:{c1}: {exc}") from exc
            for out, r in zip(outs, res if both else (res,)):
                out[r0:r1, c0:c1] = r
    if symmetric:
        for out in outs:
            _mirror_upper(out, tile)
    return tuple(outs) if both else outs[0]


def _mirror_upper(out, tile):
    n = out.shape[0]
    for r0, r1 in _tile(n, tile):
        blk = out[r0:r1, r0:r1]
        out[r0:r1, r0:r1] = 0.5 * (blk + blk.T)
        out[r1:, r0:r1] = out[r0:r1, r1:].T


def _graph_kernel(arch, x1, x2, adj1, adj2, symmetric, full, both):
    if adj1 is None or adj2 is None:
        raise DimensionError("graph architectures need adjacency matrices")
    g1, g2 = _group_graphs(x1, adj1), _group_graphs(x2, adj2)
    n1 = sum(len(idx) for idx, _, _ in g1)
    n2 = sum(len(idx) for idx, _, _ in g2)
    outs = [np.empty((n1, n2)) for _ in range(2 if both else 1)]
    for idx1, f1, a1 in g1:
        for idx2, f2, a2 in g2:
            try:
                res = _pair_kernel(arch, f1, f2, a1, a2, full, both)
            except NumericDomainError as exc:
                raise NumericDomainError(f"graph pair group {idx1[0]}x{idx2[0]}: {exc}") from exc
            for out, r in zip(outs, res if both else (res,)):
                out[np.ix_(idx1, idx2)] = r
    if symmetric:
        outs = [0.5 * (o + o.T) for o in outs]
    return tuple(outs) if both else outs[0]


def _group_graphs(x, adj):
    if isinstance(x, np.ndarray) and x.ndim == 3:
        return [(np.arange(x.shape[0]), x, np.asarray(adj, dtype=np.float64))]
    groups = {}
    for i, (f, a) in enumerate(zip(x, adj)):
        groups.setdefault(np.asarray(f).shape[0], []).append(i)
    out = []
    for _, idx in sorted(groups.items()):
        out.append(
            (
                np.array(idx),
                np.stack([np.asarray(x[i], dtype=np.float64) for i in idx]),
                np.stack([np.asarray(adj[i], dtype=np.float64) for i in idx]),
            )
        )
    return out
