"""Dataset specs used by configs: tensor files, synthetic generators, bundled digits."""

from __future__ import annotations

import numpy as np

from nkscale.harness import synthetic
from nkscale.tensorio import read_labels, read_tensor


def load(spec: dict, seed: int = 0):
    """Resolve a dataset spec into ``(inputs, labels)``.

    Specs:
      ``{"inputs": path, "labels": path}``: tensor file + label CSV;
      ``{"synthetic": "teacher", "n": N, "offset": k, "dim": d, ...}``: rows
      ``[k, k+N)`` of the random-teacher stream;
      ``{"synthetic": "images", "n": N, "offset": k, ...}``: flip-symmetric images;
      ``{"builtin": "digits", "split": "train"|"test", "n_test": m, "classes": [...]}``.
    """
    spec = dict(spec)
    if "inputs" in spec:
        x = read_tensor(spec["inputs"])
        y = read_labels(spec["labels"]) if spec.get("labels") else np.zeros(len(x))
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        if spec.get("integer_labels", True) and not np.isnan(y).any() and np.all(y == np.round(y)):
            y = y.astype(int)
        return x, y
    kind = spec.pop("synthetic", None)
    if kind is not None:
        n = int(spec.pop("n"))
        offset = int(spec.pop("offset", 0))
        s = int(spec.pop("seed", seed))
        if kind == "teacher":
            x, y, _, _ = synthetic.teacher_classification(offset + n, 0, seed=s, **spec)
        elif kind == "images":
            x, y = synthetic.symmetric_images(offset + n, seed=s, **spec)
        else:
            raise ValueError(f"unknown synthetic dataset {kind!r}")
        return x[offset:], y[offset:]
    if spec.get("builtin") == "digits":
        return load_digits(spec.get("split", "train"), int(spec.get("n_test", 300)), spec.get("classes"),
                           bool(spec.get("as_images", False)), int(spec.get("seed", seed)))
    raise ValueError(f"unrecognized dataset spec {spec!r}")


def load_digits(split: str, n_test: int, classes=None, as_images: bool = False, seed: int = 0):
    """The 8x8 handwritten digits bundled with scikit-learn, split by a seeded shuffle."""
    from sklearn.datasets import load_digits as _load

    d = _load()
    x, y = d.images / 16.0, d.target
    if classes is not None:
        keep = np.isin(y, classes)
        x, y = x[keep], np.searchsorted(np.sort(classes), y[keep])
    order = np.random.default_rng(seed).permutation(len(x))
    x, y = x[order], y[order]
    sl = slice(0, n_test) if split == "test" else slice(n_test, None)
    x, y = x[sl], y[sl]
    return (x[..., None] if as_images else x.reshape(len(x), -1)), y
