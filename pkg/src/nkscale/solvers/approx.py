"""Approximate kernel regression: Nystrom, subset of regressors, block diagonal, BCM.

Kernel arguments accept a dense array or any object with ``sub(rows, cols)``
(e.g. :class:`nkscale.store.StoreKernel`), so only the needed entries are read.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from nkscale.errors import DimensionError, SingularityError

log = logging.getLogger(__name__)

METHODS = ("nystrom", "sor", "block_diag", "bcm")
MAX_JITTER = 1e-2


@dataclass(frozen=True)
class ApproxConfig:
    method: str
    size: int
    seed: int = 0
    jitter: float = 1e-6

    def __post_init__(self):
        m = self.method.replace("-", "_")
        if m not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "method", m)
        if self.size < 1:
            raise ValueError("size must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")


def take(K, rows, cols) -> np.ndarray:
    if isinstance(K, np.ndarray):
        return K[np.ix_(rows, cols)]
    return K.sub(rows, cols)


def select_inducing(n: int, r: int, seed: int) -> np.ndarray:
    """Uniformly random subset of size r."""
    if not 1 <= r <= n:
        raise ValueError(f"size {r} outside [1, {n}]")
    return np.random.default_rng(seed).permutation(n)[:r]


def random_partitions(n: int, r: int, seed: int) -> list:
    """Seeded shuffle cut into contiguous groups of size r (last one ragged)."""
    if not 1 <= r <= n:
        raise ValueError(f"size {r} outside [1, {n}]")
    perm = np.random.default_rng(seed).permutation(n)
    return [perm[k:k + r] for k in range(0, n, r)]


def chol_jitter(A, start: float = 0.0, label: str = "matrix"):
    """Lower Cholesky factor, adding ``jitter * I`` (x10 per retry, up to 1e-2) if needed."""
    A = np.asarray(A, dtype=np.float64)
    jitter = start
    while True:
        try:
            L = scipy.linalg.cholesky(A + jitter * np.eye(len(A)), lower=True)
            if jitter > start:
                warnings.warn(f"{label}: added jitter {jitter:.1e} for a stable Cholesky", RuntimeWarning, stacklevel=2)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter <= 0 else jitter * 10
            if jitter > MAX_JITTER * (1 + 1e-9):
                raise SingularityError(f"{label} is not positive definite even with jitter {MAX_JITTER}") from None


def _as2d(y):
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(y.shape[0], -1), y.ndim == 1


# ---------------------------------------------------------------- Nystrom


@dataclass
class NystromModel:
    inducing: np.ndarray
    alpha: np.ndarray  # n x T, for exact test rows
    beta: np.ndarray  # r x T, for the projected predictor K_*m beta

    def predict(self, k_star=None, k_star_m=None, projected: bool = False) -> np.ndarray:
        if projected:
            return np.asarray(k_star_m) @ self.beta
        return np.asarray(k_star) @ self.alpha


def nystrom_solve(K_nm, K_mm, y, lam: float, inducing=None) -> NystromModel:
    """Solve ``(K_nm K_mm^-1 K_mn + lam I) alpha = y`` in O(r^2 n).

    With ``F = K_nm L^-T`` (``L L^T = K_mm``) the approximate kernel is
    ``F F^T`` and Woodbury gives ``alpha = (y - F (lam I + F^T F)^-1 F^T y) / lam``.
    At ``lam = 0`` the pseudo-inverse solution ``F (F^T F)^-2 F^T y`` is used.
    """
    K_nm = np.asarray(K_nm, dtype=np.float64)
    Y, single = _as2d(y)
    if K_nm.shape[0] != Y.shape[0] or K_nm.shape[1] != len(K_mm):
        raise DimensionError("K_nm, K_mm and y disagree")
    L, _ = chol_jitter(K_mm, 0.0, "K_mm")
    F = scipy.linalg.solve_triangular(L, K_nm.T, lower=True).T
    G = F.T @ F
    Fy = F.T @ Y
    if lam > 0:
        c = scipy.linalg.cho_solve(scipy.linalg.cho_factor(lam * np.eye(len(G)) + G, lower=True), Fy)
        alpha = (Y - F @ c) / lam
        w = (Fy - G @ c) / lam  # F^T alpha
    else:
        cf = scipy.linalg.cho_factor(G, lower=True)
        u = scipy.linalg.cho_solve(cf, scipy.linalg.cho_solve(cf, Fy))
        alpha = F @ u
        w = G @ u
    beta = scipy.linalg.solve_triangular(L, w, lower=True, trans="T")
    if single:
        alpha, beta = alpha[:, 0], beta[:, 0]
    idx = np.arange(len(K_mm)) if inducing is None else np.asarray(inducing)
    return NystromModel(idx, alpha, beta)


# ---------------------------------------------------------------- subset of regressors


def sor_predict(K_nm, K_mm, K_test_m, y, lam: float) -> np.ndarray:
    """``K_*m (K_mn K_nm + lam K_mm)^-1 K_mn y`` in O(r^2 n).

    The normal equations are solved as the least-squares problem
    ``[K_nm; sqrt(lam) R] w ~ [y; 0]`` with ``R^T R = K_mm``, which avoids
    squaring the condition number of ``K_nm``.
    """
    K_nm = np.asarray(K_nm, dtype=np.float64)
    K_mm = np.asarray(K_mm, dtype=np.float64)
    Y, single = _as2d(y)
    r = len(K_mm)
    if K_nm.shape[0] != Y.shape[0] or K_nm.shape[1] != r or np.shape(K_test_m)[1] != r:
        raise DimensionError("K_nm, K_mm, K_test_m and y disagree")
    if lam > 0:
        L, _ = chol_jitter(K_mm, 0.0, "K_mm")
        A = np.vstack([K_nm, np.sqrt(lam) * L.T])
        rhs = np.vstack([Y, np.zeros((r, Y.shape[1]))])
    else:
        A, rhs = K_nm, Y
    Q, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    if d.min(initial=np.inf) <= 1e-14 * d.max(initial=0.0):
        raise SingularityError("SoR normal equations are singular; increase jitter")
    w = scipy.linalg.solve_triangular(R, Q.T @ rhs)
    out = np.asarray(K_test_m) @ w
    return out[:, 0] if single else out


# ---------------------------------------------------------------- block diagonal


def block_diag_solve(K, y, r: int, lam: float, seed: int = 0) -> np.ndarray:
    """Ignore kernel entries outside random partitions of size r; alpha in original order."""
    Y, single = _as2d(y)
    n = Y.shape[0]
    alpha = np.zeros_like(Y)
    for part in random_partitions(n, r, seed):
        Kb = take(K, part, part) + lam * np.eye(len(part))
        L, _ = chol_jitter(Kb, 0.0, "diagonal block")
        alpha[part] = scipy.linalg.cho_solve((L, True), Y[part])
    return alpha[:, 0] if single else alpha


# ---------------------------------------------------------------- Bayesian committee machine


def bcm_predict(K, K_test_train, K_test_test, y, r: int, lam: float, seed: int = 0,
                test_block: int | None = None, prior_jitter: float = 1e-10) -> np.ndarray:
    """Transductive Bayesian committee machine posterior mean.

    Training data is split into M random partitions of size r; for every test
    block (size ``test_block``, default r) each partition gives a GP posterior
    mean ``m_i`` and covariance ``S_i``, combined as
    ``C^-1 = sum_i S_i^-1 - (M - 1) K_**^-1`` and ``mean = C sum_i S_i^-1 m_i``.
    ``K_test_test`` may be the full test prior or any object with ``sub``.
    """
    Y, single = _as2d(y)
    n = Y.shape[0]
    n_test = K_test_train.shape[0]
    parts = random_partitions(n, r, seed)
    M = len(parts)
    tb = test_block or r
    factors = []
    for part in parts:
        Kb = take(K, part, part) + lam * np.eye(len(part))
        L, _ = chol_jitter(Kb, 0.0, "partition kernel")
        factors.append((part, L, scipy.linalg.cho_solve((L, True), Y[part])))
    out = np.zeros((n_test, Y.shape[1]))
    for t0 in range(0, n_test, tb):
        tidx = np.arange(t0, min(t0 + tb, n_test))
        if M == 1:
            part, L, a = factors[0]
            out[tidx] = take(K_test_train, tidx, part) @ a
            continue
        Kss = take(K_test_test, tidx, tidx)
        Lss, j0 = chol_jitter(Kss, prior_jitter, "test prior")
        prec = -(M - 1) * scipy.linalg.cho_solve((Lss, True), np.eye(len(tidx)))
        rhs = np.zeros((len(tidx), Y.shape[1]))
        for part, L, a in factors:
            Ksi = take(K_test_train, tidx, part)
            mean_i = Ksi @ a
            V = scipy.linalg.solve_triangular(L, Ksi.T, lower=True)
            S = Kss + j0 * np.eye(len(tidx)) - V.T @ V
            S = 0.5 * (S + S.T)
            Ls, _ = chol_jitter(S, prior_jitter, "partition posterior covariance")
            S_inv = scipy.linalg.cho_solve((Ls, True), np.eye(len(tidx)))
            prec += S_inv
            rhs += S_inv @ mean_i
        prec = 0.5 * (prec + prec.T)
        try:
            out[tidx] = scipy.linalg.solve(prec, rhs, assume_a="sym")
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"BCM combined precision is singular: {exc}") from None
    return out[:, 0] if single else out


# ---------------------------------------------------------------- dispatch


def approx_predict(config: ApproxConfig, K, K_test_train, y, K_test_test=None) -> np.ndarray:
    """Test predictions of one approximate method."""
    Y, single = _as2d(y)
    n = Y.shape[0]
    r = min(config.size, n)
    lam = config.jitter
    all_idx = np.arange(n)
    test_idx = np.arange(K_test_train.shape[0])
    if config.method in ("nystrom", "sor"):
        ind = select_inducing(n, r, config.seed)
        K_nm = take(K, all_idx, ind)
        K_mm = K_nm[ind]
        if config.method == "sor":
            out = sor_predict(K_nm, K_mm, take(K_test_train, test_idx, ind), Y, lam)
        else:
            model = nystrom_solve(K_nm, K_mm, Y, lam, ind)
            out = model.predict(take(K_test_train, test_idx, all_idx))
    elif config.method == "block_diag":
        out = take(K_test_train, test_idx, all_idx) @ block_diag_solve(K, Y, r, lam, config.seed)
    else:
        if K_test_test is None:
            raise ValueError("bcm needs the test-test kernel")
        out = bcm_predict(K, K_test_train, K_test_test, Y, r, lam, config.seed)
    return out[:, 0] if single else out
