"""Greedy partial pivoted Cholesky and its Woodbury application as a preconditioner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from nkscale.errors import DimensionError, NumericDomainError, SingularityError

STOP_RATIO = 1e-12


@dataclass
class Preconditioner:
    pivots: list
    factor: np.ndarray  # n x r
    lam: float = 0.0
    _inner: tuple | None = field(default=None, repr=False)

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    @property
    def n(self) -> int:
        return self.factor.shape[0]

    def with_lambda(self, lam: float) -> "Preconditioner":
        return Preconditioner(self.pivots, self.factor, float(lam))

    def dense(self) -> np.ndarray:
        return self.factor @ self.factor.T + self.lam * np.eye(self.n)

    def __call__(self, v):
        return precond_apply(self, v)


def identity_preconditioner(n: int, lam: float = 1.0) -> Preconditioner:
    return Preconditioner([], np.zeros((n, 0)), lam)


def pivoted_cholesky(diag, row, rank: int, lam: float = 0.0, stop_ratio: float = STOP_RATIO) -> Preconditioner:
    """Rank-``rank`` greedy pivoted Cholesky from a diagonal and a row accessor.

    ``diag`` is the kernel diagonal (array); ``row(i)`` returns kernel row i.
    Only the pivot rows are ever requested. Ties in the residual diagonal go
    to the lowest index. Stops early once the residual diagonal is below
    ``stop_ratio`` times its initial maximum.
    """
    d = np.array(diag, dtype=np.float64)
    n = d.size
    if rank < 0 or rank > n:
        raise ValueError(f"rank {rank} outside [0, {n}]")
    if np.any(d < -1e-9 * max(1.0, np.abs(d).max(initial=0.0))):
        raise NumericDomainError("kernel diagonal has negative entries")
    L = np.zeros((n, rank))
    pivots = []
    start = d.max(initial=0.0)
    for k in range(rank):
        p = int(np.argmax(d))
        if d[p] <= stop_ratio * start:
            break
        r = np.asarray(row(p), dtype=np.float64)
        if r.shape != (n,):
            raise DimensionError(f"row accessor returned shape {r.shape}, expected ({n},)")
        if abs(r[p] - diag[p]) > 1e-9 * (1.0 + abs(diag[p])):
            raise ValueError(f"row({p})[{p}] = {r[p]} disagrees with diag[{p}] = {diag[p]}")
        col = (r - L[:, :k] @ L[p, :k]) / np.sqrt(d[p])
        if not np.all(np.isfinite(col)):
            raise NumericDomainError(f"nonfinite factor column at step {k}")
        L[:, k] = col
        pivots.append(p)
        d = np.maximum(d - col**2, 0.0)
        d[p] = 0.0
    return Preconditioner(pivots, L[:, : len(pivots)].copy(), float(lam))


def pivoted_cholesky_dense(K, rank: int, lam: float = 0.0) -> Preconditioner:
    K = np.asarray(K, dtype=np.float64)
    return pivoted_cholesky(np.diag(K), lambda i: K[i], rank, lam)


def _inner_factor(P: Preconditioner):
    if P._inner is None:
        L = P.factor
        inner = P.lam * np.eye(P.rank) + L.T @ L
        try:
            P._inner = scipy.linalg.cho_factor(inner, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"preconditioner inner system: {exc}") from None
    return P._inner


def precond_apply(P: Preconditioner, v) -> np.ndarray:
    """``(L L^T + lam I)^{-1} v`` by Woodbury with a once-factored r x r inner matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != P.n:
        raise DimensionError(f"vector length {v.shape[0]} != preconditioner size {P.n}")
    L = P.factor
    if P.lam > 0:
        if P.rank == 0:
            return v / P.lam
        w = scipy.linalg.cho_solve(_inner_factor(P), L.T @ v)
        return (v - L @ w) / P.lam
    if P.rank != P.n:
        raise SingularityError("lam = 0 needs a full-rank factor")
    if P._inner is None:
        P._inner = scipy.linalg.lu_factor(L)
    lu = P._inner
    # L L^T x = v with L a row-permuted triangular factor; LU keeps this general
    return scipy.linalg.lu_solve(lu, scipy.linalg.lu_solve(lu, v), trans=1)
