"""Empirical NTK of finite networks in NTK parameterization (JAX, float64).

Each sampled network has a single scalar readout; its NTK on a batch is
``J J^T`` with ``J`` the Jacobian of the outputs with respect to every trainable
parameter. ``jacobian="fd"`` takes central differences with step 1e-4 on each
parameter; ``"autodiff"`` (default) uses reverse mode and is what makes desk
scale conv nets affordable. Tests pin the two against each other.
"""

from __future__ import annotations

import itertools
import math

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
from jax.flatten_util import ravel_pytree  # noqa: E402
from jax.scipy.special import erf  # noqa: E402

from nkscale.kernels import layers as L  # noqa: E402

FD_STEP = 1e-4


def _fan_in(layer, c):
    if isinstance(layer, L.ConvAffine):
        return c * math.prod(layer.filter_shape)
    return c


def init_network(arch: L.ArchSpec, in_shape, width: int, key):
    """Draw standard-normal parameters and fixed random features.

    Returns ``(params, consts)``: ``params`` is a list with one entry per layer
    (``{"w", "b"}`` for affine layers, ``None`` otherwise); ``consts`` holds the
    non-trainable draws of the normalized-exponential random features.
    """
    params, consts = [], []
    shape = tuple(in_shape[:-1])
    c = in_shape[-1]
    last = len(arch.layers) - 1
    for i, layer in enumerate(arch.layers):
        key, k1, k2 = jax.random.split(key, 3)
        p, const = None, None
        if isinstance(layer, (L.DenseAffine, L.ConvAffine)):
            out = 1 if i == last else width
            f = layer.filter_shape if isinstance(layer, L.ConvAffine) else ()
            p = {
                "w": jax.random.normal(k1, f + (c, out), dtype=jnp.float64),
                "b": jax.random.normal(k2, (out,), dtype=jnp.float64),
            }
            c = out
        elif isinstance(layer, L.Activation) and layer.kind == "exp_normalized":
            const = {
                "omega": jax.random.normal(k1, (c, c), dtype=jnp.float64),
                "phase": jax.random.uniform(k2, (c,), dtype=jnp.float64, maxval=2 * np.pi),
            }
        elif isinstance(layer, L.AvgPool):
            shape = tuple((n - w) // s + 1 for n, w, s in zip(shape, layer.window, layer.strides))
        elif isinstance(layer, L.GlobalAvgPool):
            shape = ()
        elif isinstance(layer, L.Flatten):
            c = c * math.prod(shape)
            shape = ()
        params.append(p)
        consts.append(const)
    return params, consts


def _conv(x, w, filter_shape):
    k = len(filter_shape)
    pads = [(0, 0)] + [(f // 2, f - 1 - f // 2) for f in filter_shape] + [(0, 0)]
    padded = jnp.pad(x, pads)
    shape = x.shape[1:1 + k]
    out = 0.0
    for offs in itertools.product(*(range(f) for f in filter_shape)):
        idx = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(offs, shape)) + (slice(None),)
        out = out + padded[idx] @ w[offs]
    return out


def apply_network(arch: L.ArchSpec, params, consts, x, adj=None):
    """Forward pass on a batch ``x`` of shape (N, *S, C); returns (N,)."""
    h = x
    for layer, p, const in zip(arch.layers, params, consts):
        if isinstance(layer, L.DenseAffine):
            scale = jnp.sqrt(layer.w_var / h.shape[-1])
            h = scale * (h @ p["w"]) + jnp.sqrt(layer.b_var) * p["b"]
        elif isinstance(layer, L.ConvAffine):
            scale = jnp.sqrt(layer.w_var / _fan_in(layer, h.shape[-1]))
            h = scale * _conv(h, p["w"], layer.filter_shape) + jnp.sqrt(layer.b_var) * p["b"]
        elif isinstance(layer, L.Activation):
            if layer.kind == "relu":
                h = jax.nn.relu(h)
            elif layer.kind == "erf":
                h = erf(h)
            elif layer.kind == "exp_normalized":
                width = h.shape[-1]
                norm = jnp.sqrt(jnp.sum(h**2, axis=-1, keepdims=True))
                u = (h / norm) @ const["omega"]
                h = jnp.sqrt(2.0) * norm / jnp.sqrt(width) * jnp.cos(u + const["phase"])
        elif isinstance(layer, L.AvgPool):
            for i, (w, s) in enumerate(zip(layer.window, layer.strides)):
                ax = 1 + i
                n_out = (h.shape[ax] - w) // s + 1
                acc = 0.0
                for o in range(w):
                    idx = [slice(None)] * h.ndim
                    idx[ax] = slice(o, o + s * (n_out - 1) + 1, s)
                    acc = acc + h[tuple(idx)]
                h = acc / w
        elif isinstance(layer, L.GlobalAvgPool):
            if h.ndim > 2:
                h = h.mean(axis=tuple(range(1, h.ndim - 1)))
        elif isinstance(layer, L.Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, L.LayerNorm):
            axes = tuple(range(1, h.ndim)) if layer.include_spatial else (h.ndim - 1,)
            h = h - h.mean(axis=axes, keepdims=True)
            h = h / jnp.sqrt((h**2).mean(axis=axes, keepdims=True))
        elif isinstance(layer, L.GraphAggregate):
            a = adj + jnp.eye(adj.shape[-1]) if layer.self_loops else adj
            h = jnp.einsum("nij,njc->nic", a, h)
        else:
            raise TypeError(f"no finite realization for {layer!r}")
    return h[:, 0]


def jacobian_autodiff(arch, params, consts, x, adj=None):
    flat, unravel = ravel_pytree(params)
    return jax.jacrev(lambda v: apply_network(arch, unravel(v), consts, x, adj))(flat)


def jacobian_fd(arch, params, consts, x, adj=None, step=FD_STEP, chunk=256):
    """Central finite differences on every parameter, vectorized in chunks."""
    flat, unravel = ravel_pytree(params)
    n_params = flat.shape[0]

    def f(v):
        return apply_network(arch, unravel(v), consts, x, adj)

    @jax.jit
    def column_block(idx):
        eye = jax.nn.one_hot(idx, n_params, dtype=flat.dtype) * step
        plus = jax.vmap(lambda e: f(flat + e))(eye)
        minus = jax.vmap(lambda e: f(flat - e))(eye)
        return (plus - minus) / (2 * step)

    cols = []
    for start in range(0, n_params, chunk):
        idx = jnp.arange(start, min(start + chunk, n_params))
        cols.append(column_block(jnp.pad(idx, (0, chunk - idx.shape[0]), constant_values=idx[-1]))[: idx.shape[0]])
    return jnp.concatenate(cols, axis=0).T


def empirical_ntk(
    arch: L.ArchSpec,
    x1,
    x2=None,
    width: int = 256,
    n_samples: int = 50,
    seed: int = 0,
    adj1=None,
    adj2=None,
    jacobian: str = "autodiff",
):
    """Average of ``J(x1) J(x2)^T`` over ``n_samples`` random networks."""
    if width < 1:
        raise ValueError("width must be >= 1")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    x1 = np.asarray(x1, dtype=np.float64)
    n1 = x1.shape[0]
    if x2 is None:
        x, adj = x1, adj1
    else:
        x = np.concatenate([x1, np.asarray(x2, dtype=np.float64)])
        adj = None if adj1 is None else np.concatenate([adj1, adj2])
    x = jnp.asarray(x)
    adj = None if adj is None else jnp.asarray(adj, dtype=jnp.float64)
    jac = {"autodiff": jacobian_autodiff, "fd": jacobian_fd}[jacobian]

    @jax.jit
    def one_sample(key):
        params, consts = init_network(arch, x.shape[1:], width, key)
        j = jac(arch, params, consts, x, adj)
        return j @ j.T

    if jacobian == "fd":
        def one_sample(key):  # noqa: F811  (fd keeps its own jit)
            params, consts = init_network(arch, x.shape[1:], width, key)
            j = jacobian_fd(arch, params, consts, x, adj)
            return j @ j.T

    keys = jax.random.split(jax.random.PRNGKey(seed), n_samples)
    total = np.zeros((x.shape[0], x.shape[0]))
    for key in keys:
        total += np.asarray(one_sample(key))
    k = total / n_samples
    return k if x2 is None else k[:n1, n1:]
