"""Posterior-mean predictions from solved kernel systems."""

from __future__ import annotations

import numpy as np

from nkscale.errors import DimensionError
from nkscale.preprocess import LabelSet
from nkscale.solvers.cg import (
    DEFAULT_JITTER,
    DEFAULT_MAX_ITER,
    DEFAULT_PRECOND_RANK,
    DEFAULT_TOL,
    CgReport,
    cg_solve,
    regularized,
)
from nkscale.solvers.cholesky import pivoted_cholesky


def kernel_predict(k_star, alpha, labels: LabelSet | None = None) -> np.ndarray:
    """``K_* alpha`` for a dense test-train kernel or a callable ``v -> K_* v``.

    With ``labels`` the result is mapped back to the original label scale.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if callable(k_star):
        pred = k_star(alpha)
    else:
        k_star = np.asarray(k_star, dtype=np.float64)
        if k_star.shape[1] != alpha.shape[0]:
            raise DimensionError(f"K_* has {k_star.shape[1]} columns, alpha has {alpha.shape[0]} rows")
        pred = k_star @ alpha
    if labels is not None and labels.mode == "regression":
        pred = labels.destandardize(pred.reshape(pred.shape[0], -1))
    return pred


def decode_classes(pred) -> np.ndarray:
    return np.argmax(np.asarray(pred).reshape(len(pred), -1), axis=1)


def solve_labels(matvec, labels: LabelSet, lam: float = DEFAULT_JITTER, diag=None, row=None,
                 precond_rank: int = DEFAULT_PRECOND_RANK, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER, callback=None) -> CgReport:
    """Solve ``(K + lam I) alpha = y`` for every task of ``labels``.

    ``matvec`` applies the bare kernel; jitter is added here. When ``diag`` and
    ``row`` accessors are given and ``precond_rank > 0`` a pivoted-Cholesky
    preconditioner is built. Partially observed tasks are solved on their
    labelled examples only.
    """
    P = None
    if precond_rank > 0 and diag is not None and row is not None:
        P = pivoted_cholesky(diag, row, min(precond_rank, labels.values.shape[0]), lam)
    mask = None if labels.mask.all() else labels.mask
    return cg_solve(regularized(matvec, lam), labels.values, P, tol, max_iter, mask=mask, callback=callback)
