"""Synthetic desk-scale tasks (no dataset downloads)."""

from __future__ import annotations

import numpy as np


def teacher_classification(n_train: int, n_test: int, dim: int = 16, n_classes: int = 4, hidden: int | None = 64,
                           label_noise: float = 0.0, seed: int = 0):
    """Inputs on the sphere, labels = argmax of a random one-hidden-layer ReLU teacher.

    ``hidden=None`` uses a linear teacher instead.

    Returns ``(x_train, y_train, x_test, y_test)`` with integer labels. The
    teacher is fixed by ``seed``; train and test draws come from the same stream.
    """
    rng = np.random.default_rng(seed)
    if hidden is None:
        W = rng.normal(size=(dim, n_classes)) / np.sqrt(dim)
    else:
        W1 = rng.normal(size=(dim, hidden)) / np.sqrt(dim)
        W2 = rng.normal(size=(hidden, n_classes)) / np.sqrt(hidden)
    x = rng.normal(size=(n_train + n_test, dim))
    x *= np.sqrt(dim) / np.linalg.norm(x, axis=1, keepdims=True)
    logits = x @ W if hidden is None else np.maximum(x @ W1, 0.0) @ W2
    logits -= logits.mean(axis=0)
    y = np.argmax(logits, axis=1)
    if label_noise > 0:
        flip = rng.random(y.size) < label_noise
        y[flip] = rng.integers(0, n_classes, flip.sum())
    return x[:n_train], y[:n_train], x[n_train:], y[n_train:]


def symmetric_images(n: int, size: int = 8, channels: int = 3, n_classes: int = 4, seed: int = 0,
                     noise: float = 0.5):
    """Small images whose class depends on a left-right-symmetric template.

    Each class has a random template made mirror-symmetric, so horizontal
    flips are label-preserving; examples are template + smooth per-example
    shift + pixel noise. Returns ``(images (n, H, W, C), labels)``.
    """
    rng = np.random.default_rng(seed)
    templates = rng.normal(size=(n_classes, size, size, channels))
    templates = 0.5 * (templates + templates[:, :, ::-1])
    labels = rng.integers(0, n_classes, n)
    imgs = templates[labels].copy()
    # asymmetric nuisance: a random left-right gradient per example
    ramp = np.linspace(-1.0, 1.0, size)[None, None, :, None]
    imgs += rng.normal(size=(n, 1, 1, channels)) * ramp
    imgs += noise * rng.normal(size=imgs.shape)
    return imgs, labels


def powerlaw_spd(n: int, seed: int = 0, low: float = 1e-8, high: float = 1.0):
    """Random-eigenbasis SPD matrix with eigenvalues ``i^-a`` spanning [low, high]."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    a = np.log10(high / low) / np.log10(n)
    ev = high * np.arange(1, n + 1, dtype=np.float64) ** (-a)
    K = (Q * ev) @ Q.T
    return 0.5 * (K + K.T)


def random_spd(n: int, seed: int = 0, ridge: float = 0.1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, n))
    return X @ X.T / n + ridge * np.eye(n)
