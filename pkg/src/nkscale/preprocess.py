"""Input and label preprocessing.

Regularized ZCA whitening, one-hot sequence encoding, molecule featurization,
label construction with missing entries, and flip/crop augmentation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from nkscale.errors import DimensionError, SingularityError

log = logging.getLogger(__name__)

# diagonal-regularization grid used for architecture tuning
JITTER_GRID = np.concatenate([[0.0], np.logspace(-10, 4, 49)])

AUGMENT_FACTORS = (1, 2, 4, 10, 20)
CROP_PAD = 4


# ---------------------------------------------------------------- ZCA


@dataclass
class ZcaTransform:
    basis: np.ndarray
    eigvals: np.ndarray
    eps: float
    whitener: np.ndarray
    offsets: np.ndarray


def zca_fit(x, eps: float) -> ZcaTransform:
    """Fit ``W = U (D + eps * tr(D)/d * I)^{-1/2} U^T`` on flattened training inputs.

    ``D, U`` are the eigenpairs of the feature covariance of the centered data
    (normalized by the number of examples).
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    n, d = flat.shape
    if n < 1:
        raise ValueError("need at least one example")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    offsets = flat.mean(axis=0)
    centered = flat - offsets
    cov = centered.T @ centered / n
    eigvals, basis = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals, 0.0, None)
    reg = eigvals + eps * eigvals.sum() / d
    if np.min(reg) <= 1e-12 * max(np.max(eigvals), 1e-300):
        raise SingularityError("covariance is rank deficient; use eps > 0")
    whitener = (basis / np.sqrt(reg)) @ basis.T
    whitener = 0.5 * (whitener + whitener.T)
    return ZcaTransform(basis, eigvals, float(eps), whitener, offsets)


def zca_apply(t: ZcaTransform, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != t.whitener.shape[0]:
        raise DimensionError(f"feature dim {flat.shape[1]} != fitted {t.whitener.shape[0]}")
    return ((flat - t.offsets) @ t.whitener).reshape(x.shape)


# ---------------------------------------------------------------- sequences


AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
PAD = "-"


@dataclass
class SequenceEncoder:
    """One-hot encoder with a reserved pad symbol and train-set standardization."""

    alphabet: str = AMINO_ACIDS
    pad: str = PAD
    length: int | None = None
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if not self.alphabet:
            raise ValueError("alphabet must be nonempty")
        if self.pad in self.alphabet:
            raise ValueError("pad symbol must not be part of the alphabet")
        self._index = {ch: i for i, ch in enumerate(self.alphabet + self.pad)}

    def one_hot(self, seqs, length=None) -> np.ndarray:
        length = length or self.length or max(len(s) for s in seqs)
        out = np.zeros((len(seqs), length, len(self._index)))
        for i, s in enumerate(seqs):
            if len(s) > length:
                raise DimensionError(f"sequence {i} longer than encoding length {length}")
            for j, ch in enumerate(s.ljust(length, self.pad)):
                try:
                    out[i, j, self._index[ch]] = 1.0
                except KeyError:
                    raise ValueError(f"character {ch!r} in sequence {i} is outside the alphabet") from None
        return out

    def fit(self, seqs) -> "SequenceEncoder":
        self.length = max(len(s) for s in seqs)
        oh = self.one_hot(seqs)
        self.mean = oh.mean(axis=0)
        sd = oh.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)
        return self

    def transform(self, seqs) -> np.ndarray:
        if self.mean is None:
            raise RuntimeError("encoder is not fitted")
        return (self.one_hot(seqs) - self.mean) / self.scale


def encode_sequences(seqs, alphabet=AMINO_ACIDS, pad=PAD):
    """Pad, one-hot and standardize training sequences.

    Returns ``(features, encoder)``; features have shape (n, length, |alphabet|+1)
    and the fitted encoder is reused for test data.
    """
    enc = SequenceEncoder(alphabet, pad).fit(seqs)
    return enc.transform(seqs), enc


# ---------------------------------------------------------------- molecules

CATEGORICAL_ATOM_FIELDS = ("atomic_num", "chirality", "hybridization", "is_aromatic", "is_in_ring")
ORDINAL_ATOM_FIELDS = ("degree", "formal_charge", "num_hs", "num_radical_electrons")


@dataclass
class MoleculeGraph:
    node_features: np.ndarray
    adjacency: np.ndarray


def featurize_molecules(raw_graphs, vocabularies: dict) -> list[MoleculeGraph]:
    """Featurize molecules given as ``{"atoms": [dict, ...], "bonds": [(i, j), ...]}``.

    Each atom dict carries the five categorical fields (one-hot against the
    closed ``vocabularies``) and the four ordinal fields (copied as numbers).
    Bond features are ignored; bonds become an unweighted symmetric adjacency.
    """
    for field in CATEGORICAL_ATOM_FIELDS:
        if field not in vocabularies:
            raise ValueError(f"missing vocabulary for {field!r}")
    lookup = {f: {v: i for i, v in enumerate(vocabularies[f])} for f in CATEGORICAL_ATOM_FIELDS}
    width = sum(len(vocabularies[f]) for f in CATEGORICAL_ATOM_FIELDS) + len(ORDINAL_ATOM_FIELDS)
    out = []
    for g_idx, g in enumerate(raw_graphs):
        atoms = g["atoms"]
        feats = np.zeros((len(atoms), width))
        for a_idx, atom in enumerate(atoms):
            col = 0
            for f in CATEGORICAL_ATOM_FIELDS:
                try:
                    feats[a_idx, col + lookup[f][atom[f]]] = 1.0
                except KeyError:
                    raise ValueError(
                        f"molecule {g_idx} atom {a_idx}: {f}={atom.get(f)!r} not in vocabulary"
                    ) from None
                col += len(vocabularies[f])
            for f in ORDINAL_ATOM_FIELDS:
                feats[a_idx, col] = float(atom.get(f, 0))
                col += 1
        adj = np.zeros((len(atoms), len(atoms)))
        for i, j in g.get("bonds", ()):
            if i != j:
                adj[i, j] = adj[j, i] = 1.0
        out.append(MoleculeGraph(feats, adj))
    return out


# ---------------------------------------------------------------- labels


@dataclass
class LabelSet:
    values: np.ndarray
    mask: np.ndarray
    centering: np.ndarray
    scale: np.ndarray
    mode: str = "regression"
    tasks: np.ndarray | None = None

    @property
    def n_tasks(self) -> int:
        return self.values.shape[1]

    def destandardize(self, pred) -> np.ndarray:
        return np.asarray(pred) * self.scale + self.centering

    def raw(self) -> np.ndarray:
        """Targets on the original scale, NaN where masked."""
        out = self.destandardize(self.values)
        return np.where(self.mask, out, np.nan)


def one_hot_targets(labels, n_classes: int) -> np.ndarray:
    """Zero-mean one-hot rows: ``1 - 1/C`` at the true class, ``-1/C`` elsewhere."""
    labels = np.asarray(labels).astype(int).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("class index out of range")
    out = np.full((labels.size, n_classes), -1.0 / n_classes)
    out[np.arange(labels.size), labels] += 1.0
    return out


def make_labels(values, mode: str = "regression", n_classes: int | None = None) -> LabelSet:
    """Build targets from raw labels; NaN marks an unassayed entry.

    ``classification`` expects integer class ids (n,) and returns zero-mean
    one-hot targets. ``regression`` standardizes each task over its observed
    entries; tasks without any observation are dropped.
    """
    values = np.asarray(values, dtype=np.float64)
    if mode == "classification":
        labels = values.ravel()
        if np.isnan(labels).any():
            raise ValueError("classification labels may not be missing")
        n_classes = n_classes or int(labels.max()) + 1
        t = one_hot_targets(labels, n_classes)
        return LabelSet(
            t, np.ones_like(t, dtype=bool), np.zeros(n_classes), np.ones(n_classes), mode, np.arange(n_classes)
        )
    if mode != "regression":
        raise ValueError(f"unknown label mode {mode!r}")
    if values.ndim == 1:
        values = values[:, None]
    mask = ~np.isnan(values)
    keep = mask.any(axis=0)
    for t in np.flatnonzero(~keep):
        log.warning("task %d has no labels and is dropped", t)
    values, mask = values[:, keep], mask[:, keep]
    counts = mask.sum(axis=0)
    filled = np.where(mask, values, 0.0)
    center = filled.sum(axis=0) / counts
    var = (np.where(mask, values - center, 0.0) ** 2).sum(axis=0) / counts
    scale = np.where(var > 0, np.sqrt(var), 1.0)
    std = np.where(mask, (filled - center) / scale, 0.0)
    return LabelSet(std, mask, center, scale, mode, np.flatnonzero(keep))


# ---------------------------------------------------------------- augmentation


def _example_rng(seed, copy, index):
    return np.random.default_rng([seed, copy, index])


def random_crop_flip(image, rng, pad=CROP_PAD):
    """Zero-pad by ``pad`` pixels, crop back to size at a random offset, flip with p=1/2."""
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = padded[dy:dy + h, dx:dx + w]
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return out


def augment_flip_crop(images, factor: int, seed: int = 0):
    """Expand an (n, H, W, C) image set by ``factor``.

    Returns ``(expanded, source_index)``; copy ``k`` of the set occupies rows
    ``k*n:(k+1)*n``. Copy 0 is the original, copy 1 the horizontal flips, and
    every further copy a random 4-pixel crop with a random flip, seeded per
    example so serial and parallel runs agree.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DimensionError("images must be laid out as (n, H, W, C)")
    if factor not in AUGMENT_FACTORS:
        raise ValueError(f"factor must be one of {AUGMENT_FACTORS}")
    n = images.shape[0]
    copies = [images]
    if factor >= 2:
        copies.append(images[:, :, ::-1])
    for k in range(2, factor):
        copies.append(np.stack([random_crop_flip(images[i], _example_rng(seed, k, i)) for i in range(n)]))
    return np.concatenate(copies), np.tile(np.arange(n), factor)
