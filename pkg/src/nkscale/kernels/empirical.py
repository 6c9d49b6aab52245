"""Monte-Carlo kernels of finite random networks, used to check the analytic code.

NNGP mode draws finite-width networks and averages the readout covariance.
Affine layers are realized either with explicit Gaussian weights or, when the
fan-in is large, by drawing the layer's pre-activations directly from their
conditional Gaussian given the previous layer's features. The two are equal in
distribution; the second avoids materializing 4096 x 4096 weight matrices.

NTK mode lives in :mod:`nkscale.kernels.empirical_ntk` (needs JAX).
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import special

from nkscale.errors import DimensionError
from nkscale.kernels import layers as L


def _check_args(width, n_samples):
    if width < 1:
        raise ValueError("width must be >= 1")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")


def _gram(flat):
    return flat @ flat.T


def _patches(feat, filter_shape):
    """im2col: (N, *S, C) -> (N, *S, F*C) with zero padding, offsets k - F//2."""
    k = len(filter_shape)
    pads = [(0, 0)] + [(f // 2, f - 1 - f // 2) for f in filter_shape] + [(0, 0)]
    padded = np.pad(feat, pads)
    shape = feat.shape[1:1 + k]
    cols = []
    for offs in itertools.product(*(range(f) for f in filter_shape)):
        idx = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(offs, shape)) + (slice(None),)
        cols.append(padded[idx])
    return np.concatenate(cols, axis=-1)


def _shifted_gram(gram, n, shape, filter_shape):
    """Gram of the im2col patches, assembled from the plain Gram of the features."""
    k = len(shape)
    g = gram.reshape((n,) + shape + (n,) + shape)
    pads = [(0, 0)] * g.ndim
    for i, f in enumerate(filter_shape):
        pads[1 + i] = pads[2 + k + i] = (f // 2, f - 1 - f // 2)
    padded = np.pad(g, pads)
    out = np.zeros_like(g)
    for offs in itertools.product(*(range(f) for f in filter_shape)):
        idx = [slice(None)] * g.ndim
        for i, o in enumerate(offs):
            idx[1 + i] = slice(o, o + shape[i])
            idx[2 + k + i] = slice(o, o + shape[i])
        out += padded[tuple(idx)]
    m = n * math.prod(shape)
    return out.reshape(m, m)


def _gaussian_columns(cov, width, rng):
    """``width`` iid draws from N(0, cov), returned as columns of an (M, width) array."""
    m = cov.shape[0]
    scale = max(float(np.trace(cov)) / m, 1e-300)
    jitter = 0.0
    for _ in range(8):
        try:
            chol = np.linalg.cholesky(cov + jitter * scale * np.eye(m))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 100
    else:
        w, v = np.linalg.eigh(cov)
        chol = v * np.sqrt(np.clip(w, 0, None))
    return chol @ rng.standard_normal((m, width))


def _affine(feat, layer, width, rng):
    n, shape, c = feat.shape[0], feat.shape[1:-1], feat.shape[-1]
    if isinstance(layer, L.ConvAffine):
        f = math.prod(layer.filter_shape)
    else:
        f = 1
    fan_in = c * f
    m = n * math.prod(shape)
    bias = math.sqrt(layer.b_var) * rng.standard_normal(width)
    scale = math.sqrt(layer.w_var / fan_in)
    if fan_in <= m:
        x = _patches(feat, layer.filter_shape) if f > 1 else feat
        w = rng.standard_normal((fan_in, width))
        return scale * (x @ w) + bias
    flat = feat.reshape(m, c)
    gram = _gram(flat)
    if f > 1:
        gram = _shifted_gram(gram, n, shape, layer.filter_shape)
    cov = (layer.w_var / fan_in) * gram
    z = _gaussian_columns(cov, width, rng)
    return z.reshape((n,) + shape + (width,)) + bias


def _exp_normalized(z, rng):
    """Random-feature realization of the normalized exponential dual."""
    shape, width = z.shape[:-1], z.shape[-1]
    flat = z.reshape(-1, width)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    unit = flat / np.maximum(norms, 1e-300)
    s = norms**2 / width
    if unit.shape[0] < width:
        u = _gaussian_columns(unit @ unit.T, width, rng)
    else:
        u = unit @ rng.standard_normal((width, width))
    phase = rng.uniform(0, 2 * np.pi, width)
    return (np.sqrt(2 * s) * np.cos(u + phase)).reshape(shape + (width,))


def _activation(z, kind, rng):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "erf":
        return special.erf(z)
    if kind == "identity":
        return z
    if kind == "exp_normalized":
        return _exp_normalized(z, rng)
    raise ValueError(kind)


def _avg_pool(feat, window, strides):
    for i, (w, s) in enumerate(zip(window, strides)):
        ax = 1 + i
        n_out = (feat.shape[ax] - w) // s + 1
        acc = 0
        for o in range(w):
            idx = [slice(None)] * feat.ndim
            idx[ax] = slice(o, o + s * (n_out - 1) + 1, s)
            acc = acc + feat[tuple(idx)]
        feat = acc / w
    return feat


def _layer_norm(feat, include_spatial):
    axes = tuple(range(1, feat.ndim)) if include_spatial else (feat.ndim - 1,)
    centered = feat - feat.mean(axis=axes, keepdims=True)
    return centered / np.sqrt((centered**2).mean(axis=axes, keepdims=True))


def _forward_features(arch, x, adj, width, rng):
    feat = np.asarray(x, dtype=np.float64)
    for layer in arch.layers[:-1]:
        if isinstance(layer, (L.DenseAffine, L.ConvAffine)):
            feat = _affine(feat, layer, width, rng)
        elif isinstance(layer, L.Activation):
            feat = _activation(feat, layer.kind, rng)
        elif isinstance(layer, L.AvgPool):
            feat = _avg_pool(feat, layer.window, layer.strides)
        elif isinstance(layer, L.GlobalAvgPool):
            if feat.ndim > 2:
                feat = feat.mean(axis=tuple(range(1, feat.ndim - 1)))
        elif isinstance(layer, L.Flatten):
            feat = feat.reshape(feat.shape[0], -1)
        elif isinstance(layer, L.LayerNorm):
            feat = _layer_norm(feat, layer.include_spatial)
        elif isinstance(layer, L.GraphAggregate):
            a = adj + np.eye(adj.shape[-1]) if layer.self_loops else adj
            feat = np.einsum("nij,njc->nic", a, feat)
        else:
            raise TypeError(f"no finite realization for {layer!r}")
    if feat.ndim != 2:
        raise DimensionError("features must be flat before the readout")
    return feat


def empirical_nngp(arch: L.ArchSpec, x1, x2=None, width=4096, n_samples=200, seed=0, adj1=None, adj2=None):
    """Average readout covariance of ``n_samples`` random networks of the given width.

    The readout covariance of each network is its exact expectation over the
    final layer's weights, ``w_var * <phi, phi'> / fan_in + b_var``.
    """
    _check_args(width, n_samples)
    x1 = np.asarray(x1, dtype=np.float64)
    n1 = x1.shape[0]
    if x2 is None:
        x, adj = x1, adj1
    else:
        x = np.concatenate([x1, np.asarray(x2, dtype=np.float64)])
        adj = None if adj1 is None else np.concatenate([adj1, adj2])
    if adj is not None:
        adj = np.asarray(adj, dtype=np.float64)
    readout = arch.layers[-1]
    rng = np.random.default_rng(seed)
    total = np.zeros((x.shape[0], x.shape[0]))
    for _ in range(n_samples):
        feat = _forward_features(arch, x, adj, width, rng)
        total += readout.w_var * _gram(feat) / feat.shape[1] + readout.b_var
    k = total / n_samples
    return k if x2 is None else k[:n1, n1:]


def empirical_kernel_oracle(arch, x1, x2=None, width=4096, n_samples=200, seed=0, adj1=None, adj2=None, **kw):
    """Monte-Carlo counterpart of :func:`compute_kernel_matrix`."""
    if arch.kernel_kind == "nngp":
        return empirical_nngp(arch, x1, x2, width, n_samples, seed, adj1, adj2)
    from nkscale.kernels.empirical_ntk import empirical_ntk

    return empirical_ntk(arch, x1, x2, width, n_samples, seed, adj1, adj2, **kw)
