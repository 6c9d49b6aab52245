"""Multi right-hand-side preconditioned conjugate gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from nkscale.errors import DimensionError, DivergenceError, NotSPDError
from nkscale.solvers.cholesky import Preconditioner, precond_apply

DEFAULT_JITTER = 1e-6
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 1000
DEFAULT_PRECOND_RANK = 100


@dataclass
class CgReport:
    solution: np.ndarray
    iterations: int
    rhs_iterations: np.ndarray
    residuals: list  # per RHS: relative residual after each iteration (index 0 = start)
    energies: list  # per RHS: 0.5 x^T A x - b^T x, nonincreasing for exact arithmetic
    converged: bool
    wall_time: float
    matvecs: int = 0
    precond_norms: list = field(default_factory=list)


def regularized(matvec, lam: float):
    """``v -> (K + lam I) v`` without touching the stored kernel."""
    return lambda v: matvec(v) + lam * v


def masked_operator(matvec, mask):
    """Per-column operator ``P (K + lam I) P + (I - P)`` for partially observed targets.

    ``mask`` is n x T boolean; column t restricts the system to the examples
    labelled for task t and is the identity elsewhere.
    """
    m = np.asarray(mask, dtype=np.float64)

    def op(v, cols=None):
        mm = m if cols is None else m[:, cols]
        return mm * matvec(mm * v) + (1.0 - mm) * v

    return op


def cg_solve(matvec, b, P: Preconditioner | None = None, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, mask=None, callback=None) -> CgReport:
    """Solve ``A x = b`` for every column of ``b`` with shared operator applications.

    ``matvec`` applies A (already including the jitter) to an n x k block.
    Each column stops once ``||r|| / ||b|| <= tol``; stopped columns are frozen
    and dropped from later operator calls. ``mask`` (n x T) switches to the
    masked per-task system of :func:`masked_operator`. ``callback(k, x)`` runs
    after each iteration.
    """
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    B = b.reshape(b.shape[0], -1)
    n, T = B.shape
    if tol <= 0:
        raise ValueError("tol must be positive")
    mfloat = None
    if mask is not None:
        mfloat = np.asarray(mask, dtype=np.float64).reshape(n, -1)
        if mfloat.shape != B.shape:
            raise DimensionError("mask shape must match b")
        B = B * mfloat

    def A(v, cols):
        if mfloat is None:
            return matvec(v)
        mm = mfloat[:, cols]
        return mm * matvec(mm * v) + (1.0 - mm) * v

    def M(v, cols):
        if P is None:
            return v.copy()
        if mfloat is None:
            return precond_apply(P, v)
        mm = mfloat[:, cols]
        return mm * precond_apply(P, mm * v) + (1.0 - mm) * v

    bnorm = np.linalg.norm(B, axis=0)
    X = np.zeros_like(B)
    R = B.copy()
    all_cols = np.arange(T)
    Z = M(R, all_cols)
    Pd = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    residuals = [[1.0 if bnorm[t] > 0 else 0.0] for t in range(T)]
    energies = [[0.0] for _ in range(T)]
    pnorms = [[float(np.sqrt(max(rz[t], 0.0)))] for t in range(T)]
    iters = np.zeros(T, dtype=int)
    active = bnorm > 0
    matvecs = 0
    k = 0
    while active.any() and k < max_iter:
        cols = np.flatnonzero(active)
        p = Pd[:, cols]
        q = A(p, cols)
        matvecs += 1
        pq = np.einsum("ij,ij->j", p, q)
        if not np.all(np.isfinite(pq)):
            raise DivergenceError(f"nonfinite values at iteration {k + 1}")
        if np.any(pq <= 0):
            raise NotSPDError(f"p^T A p = {pq.min():.3e} <= 0 at iteration {k + 1}")
        alpha = rz[cols] / pq
        X[:, cols] += alpha * p
        R[:, cols] -= alpha * q
        if not np.all(np.isfinite(X[:, cols])):
            raise DivergenceError(f"nonfinite iterate at iteration {k + 1}")
        k += 1
        rel = np.linalg.norm(R[:, cols], axis=0) / bnorm[cols]
        z = M(R[:, cols], cols)
        rz_new = np.einsum("ij,ij->j", R[:, cols], z)
        for c, t in enumerate(cols):
            residuals[t].append(float(rel[c]))
            # with A x = b - r: 0.5 x^T A x - b^T x = -0.5 x^T (b + r)
            energies[t].append(float(-0.5 * X[:, t] @ (B[:, t] + R[:, t])))
            pnorms[t].append(float(np.sqrt(max(rz_new[c], 0.0))))
            iters[t] = k
        beta = rz_new / rz[cols]
        Pd[:, cols] = z + beta * p
        rz[cols] = rz_new
        active[cols] = rel > tol
        if callback is not None:
            callback(k, X)
    converged = not active.any()
    sol = X[:, 0] if single else X
    return CgReport(sol, k, iters, residuals, energies, converged, time.perf_counter() - t0, matvecs, pnorms)
