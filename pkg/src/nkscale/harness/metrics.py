"""Evaluation metrics: accuracy, MSE, Spearman, (masked mean) average precision."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.stats import rankdata

from nkscale.errors import DimensionError
from nkscale.preprocess import LabelSet

log = logging.getLogger(__name__)


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels).astype(int).ravel()
    if pred.shape[0] != labels.size:
        raise DimensionError("predictions and labels differ in length")
    return float(np.mean(np.argmax(pred.reshape(len(pred), -1), axis=1) == labels))


def mse(pred, target, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    if mask is None:
        return float(np.mean((pred - target) ** 2))
    mask = np.asarray(mask, dtype=bool).reshape(pred.shape)
    if not mask.any():
        return float("nan")
    return float(np.mean((pred - target)[mask] ** 2))


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; NaN if either side is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DimensionError("inputs differ in length")
    rx, ry = rankdata(x) - (x.size + 1) / 2, rankdata(y) - (y.size + 1) / 2
    den = np.sqrt((rx @ rx) * (ry @ ry))
    return float(rx @ ry / den) if den > 0 else float("nan")


def average_precision(scores, positives) -> float:
    """Area under the step precision-recall curve, one threshold per distinct score.

    Without ties this is the mean of precision@k over the ranks k of the
    positives; a group of tied scores enters as a single threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(positives, dtype=bool).ravel()
    n_pos = int(pos.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    last = np.r_[s[1:] != s[:-1], True]  # final position of each tie group
    tp = np.cumsum(pos)[last]
    seen = np.flatnonzero(last) + 1
    gained = np.diff(np.r_[0, tp])
    return float(np.sum(gained / n_pos * tp / seen))


def mean_average_precision(scores, positives, mask=None) -> float:
    """Average over tasks (columns) of AP on each task's unmasked examples; empty tasks are skipped."""
    S = np.asarray(scores, dtype=np.float64)
    P = np.asarray(positives, dtype=bool)
    S, P = S.reshape(len(S), -1), P.reshape(len(P), -1)
    M = np.ones_like(P) if mask is None else np.asarray(mask, dtype=bool).reshape(P.shape)
    aps = []
    for t in range(S.shape[1]):
        m = M[:, t]
        if not m.any() or not P[m, t].any():
            warnings.warn(f"task {t} has no labelled positives and is skipped", RuntimeWarning, stacklevel=2)
            continue
        aps.append(average_precision(S[m, t], P[m, t]))
    return float(np.mean(aps)) if aps else float("nan")


def evaluate(pred, labels: LabelSet, kind: str | None = None, class_ids=None) -> dict:
    """Metrics for standardized predictions against a LabelSet.

    ``classification``: accuracy from argmax (``class_ids`` are the integer
    labels) and MSE against the zero-mean one-hot targets. ``regression``: MSE
    on the original scale and mean Spearman over tasks. ``binary``: masked
    mean average precision with positives where the raw label is > 0.
    """
    kind = kind or labels.mode
    pred = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1)
    if pred.shape != labels.values.shape:
        raise DimensionError(f"predictions {pred.shape} vs labels {labels.values.shape}")
    out = {}
    if kind == "classification":
        ids = np.argmax(labels.values, axis=1) if class_ids is None else class_ids
        out["accuracy"] = accuracy(pred, ids)
        out["mse"] = mse(pred, labels.values)
    elif kind == "regression":
        raw_pred = labels.destandardize(pred)
        out["mse"] = mse(raw_pred, labels.raw(), labels.mask)
        rhos = []
        for t in range(pred.shape[1]):
            m = labels.mask[:, t]
            if m.sum() >= 2:
                rhos.append(spearman(pred[m, t], labels.values[m, t]))
        out["spearman"] = float(np.mean(rhos)) if rhos else float("nan")
    elif kind == "binary":
        raw = labels.raw()
        out["mean_ap"] = mean_average_precision(pred, np.nan_to_num(raw) > 0, labels.mask)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return out
