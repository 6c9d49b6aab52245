"""Dataset-size scaling sweeps over nested training prefixes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from nkscale.errors import DimensionError
from nkscale.harness import datasets
from nkscale.harness.metrics import evaluate
from nkscale.kernels.layers import load_arch
from nkscale.preprocess import LabelSet, augment_flip_crop, make_labels, zca_apply, zca_fit
from nkscale.solvers.cg import DEFAULT_JITTER, DEFAULT_MAX_ITER, DEFAULT_PRECOND_RANK, DEFAULT_TOL, cg_solve, regularized
from nkscale.solvers.cholesky import pivoted_cholesky_dense
from nkscale.store.access import assemble_prefix
from nkscale.store.compute import DataSource, compute_block, init_store
from nkscale.store.manifest import COMPLETE, load_manifest

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- power-law fits


@dataclass
class PowerLawFit:
    alpha_D: float
    intercept: float
    r_squared: float
    fit_range: tuple
    n_points: int


def fit_power_law(points, fit_range=None) -> PowerLawFit:
    """Least squares of log10(loss) on log10(n); ``alpha_D`` is minus the slope.

    ``points`` is a sequence of ``(n, loss)``. ``fit_range = (lo, hi)`` keeps
    only points with ``lo <= n <= hi`` (either bound may be None).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = fit_range if fit_range is not None else (None, None)
    keep = np.ones(len(pts), dtype=bool)
    if lo is not None:
        keep &= pts[:, 0] >= lo
    if hi is not None:
        keep &= pts[:, 0] <= hi
    pts = pts[keep]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points in the fit range, got {len(pts)}")
    if np.any(pts[:, 1] <= 0) or np.any(pts[:, 0] <= 0):
        raise ValueError("sizes and losses must be positive")
    x, y = np.log10(pts[:, 0]), np.log10(pts[:, 1])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= 1e-24 else 0.0)
    return PowerLawFit(float(-slope), float(intercept), float(r2), (lo, hi), len(pts))


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    arch: object = "FC3"
    kernel_kind: str = "nngp"
    train: dict = field(default_factory=dict)
    tests: dict = field(default_factory=dict)
    task: str = "classification"
    zca_eps: float | None = None
    augment: int = 1
    seed: int = 0
    solver: dict = field(default_factory=dict)
    sizes: list = field(default_factory=list)
    fit_range: tuple | None = None
    block_size: int = 256
    out_dir: str = "scaling_out"

    def __post_init__(self):
        if list(self.sizes) != sorted(self.sizes):
            raise ValueError("size grid must be sorted ascending")
        if any(s < 1 for s in self.sizes):
            raise ValueError("sizes must be positive")
        if self.fit_range is not None:
            self.fit_range = tuple(self.fit_range)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        if hasattr(self.arch, "to_dict"):
            d["arch"] = self.arch.to_dict()
        return d


def log_sizes(lo: int, hi: int, per_decade: int = 3) -> list:
    n = int(round(math.log10(hi / lo) * per_decade)) + 1
    return sorted({int(round(v)) for v in np.logspace(math.log10(lo), math.log10(hi), n)})


# ---------------------------------------------------------------- results


@dataclass
class ScalingResult:
    points: list  # dicts: n, test_set, metrics..., blocks_computed, blocks_reused, error
    fits: dict  # test_set -> PowerLawFit
    fit_range: tuple | None = None

    def series(self, test_set: str, metric: str = "mse"):
        return [(p["n"], p[metric]) for p in self.points
                if p["test_set"] == test_set and p.get(metric) is not None and not p.get("error")]

    @property
    def alpha_D(self) -> dict:
        return {k: f.alpha_D for k, f in self.fits.items()}


# ---------------------------------------------------------------- lazy prefix stores


class PrefixStore:
    """A block store whose blocks are computed on demand for leading prefixes."""

    def __init__(self, root, arch, rows, cols=None, block_size=256):
        self.arch = arch
        self.data = DataSource(rows, cols)
        self.manifest = init_store(root, arch, self.data, block_size)
        self.computed = 0
        self.reused = 0

    def ensure(self, n_rows: int, n_cols: int):
        """Make the blocks covering ``[0, n_rows) x [0, n_cols)`` complete; returns (computed, reused)."""
        m = self.manifest
        bs = m.block_size
        computed = reused = 0
        for ref in list(m.blocks):
            i, j = ref.coords
            need = i * bs < n_rows and j * bs < n_cols
            if m.symmetric:
                need = need or (j * bs < n_rows and i * bs < n_cols)
            if not need:
                continue
            if ref.status == COMPLETE:
                reused += 1
                continue
            compute_block(m, ref, self.arch, self.data)
            computed += 1
        self.manifest = load_manifest(m.root)
        self.computed += computed
        self.reused += reused
        return computed, reused

    def prefix(self, n_rows: int, n_cols: int) -> np.ndarray:
        self.ensure(n_rows, n_cols)
        return assemble_prefix(self.manifest, n_rows, n_cols)


# ---------------------------------------------------------------- sweep


def _preprocess(cfg: ExperimentConfig, x_train, y_train, tests):
    # whitening is fit on the unaugmented training images only
    t = zca_fit(x_train, cfg.zca_eps) if cfg.zca_eps is not None else None
    if cfg.augment > 1:
        x_train, src = augment_flip_crop(x_train, cfg.augment, cfg.seed)
        y_train = y_train[src]
    if t is not None:
        x_train = zca_apply(t, x_train)
        tests = {k: (zca_apply(t, x), y) for k, (x, y) in tests.items()}
    return x_train, y_train, tests


def solve_dense(K, Y, solver: dict, mask=None):
    lam = float(solver.get("jitter", DEFAULT_JITTER))
    scale = float(np.trace(K) / len(K)) if solver.get("relative_jitter", True) else 1.0
    lam *= scale
    method = solver.get("method", "cg")
    if method == "direct":
        if mask is not None and not mask.all():
            raise ValueError("direct solver does not support masked labels")
        cf = scipy.linalg.cho_factor(K + lam * np.eye(len(K)), lower=True)
        return scipy.linalg.cho_solve(cf, Y)
    rank = min(int(solver.get("precond_rank", DEFAULT_PRECOND_RANK)), len(K))
    P = pivoted_cholesky_dense(K, rank, lam) if rank > 0 else None
    rep = cg_solve(regularized(lambda v: K @ v, lam), Y, P, float(solver.get("tol", DEFAULT_TOL)),
                   int(solver.get("max_iter", DEFAULT_MAX_ITER)), mask=mask)
    if not rep.converged:
        log.warning("CG stopped at max_iter with residual %.2e", max(r[-1] for r in rep.residuals))
    return rep.solution


def scaling_run(cfg: ExperimentConfig, workdir=None) -> ScalingResult:
    """Sweep training-set sizes on nested prefixes of one fixed shuffle.

    Kernel blocks live in on-disk stores sized for the largest n, so each
    size only computes blocks not already produced by a smaller one.
    A failure at one size is recorded in its rows and the sweep continues.
    """
    arch = load_arch(cfg.arch, cfg.kernel_kind)
    x_train, y_train = datasets.load(cfg.train, cfg.seed)
    tests = {name: datasets.load(spec, cfg.seed) for name, spec in cfg.tests.items()}
    x_train, y_train, tests = _preprocess(cfg, x_train, y_train, tests)
    order = np.random.default_rng(cfg.seed).permutation(len(x_train))
    x_train, y_train = x_train[order], y_train[order]
    n_max = max(cfg.sizes)
    if n_max > len(x_train):
        raise DimensionError(f"largest size {n_max} exceeds {len(x_train)} available training examples")
    x_train, y_train = x_train[:n_max], y_train[:n_max]
    n_classes = int(max([y_train.max()] + [y.max() for _, y in tests.values()])) + 1 \
        if cfg.task == "classification" else None

    root = Path(workdir or cfg.out_dir) / "kernels"
    train_store = PrefixStore(root / "train", arch, x_train, None, cfg.block_size)
    test_stores = {name: PrefixStore(root / f"test_{name}", arch, x, x_train, cfg.block_size)
                   for name, (x, _) in tests.items()}

    points = []
    for n in cfg.sizes:
        try:
            c0, r0 = train_store.ensure(n, n)
            K = assemble_prefix(train_store.manifest, n, n)
            labels = make_labels(y_train[:n], cfg.task, n_classes)
            alpha = solve_dense(K, labels.values, cfg.solver, None if labels.mask.all() else labels.mask)
            for name, (x_te, y_te) in tests.items():
                st = test_stores[name]
                c1, r1 = st.ensure(len(x_te), n)
                pred = assemble_prefix(st.manifest, len(x_te), n) @ alpha
                if cfg.task == "classification":
                    te_labels = make_labels(y_te, cfg.task, n_classes)
                    metrics = evaluate(pred, te_labels, class_ids=y_te)
                else:
                    te_labels = _apply_standardization(labels, y_te)
                    metrics = evaluate(pred, te_labels)
                points.append({"n": n, "test_set": name, **metrics, "blocks_computed": c0 + c1,
                               "blocks_reused": r0 + r1, "error": ""})
        except Exception as exc:  # recorded, sweep continues
            log.exception("size %d failed", n)
            for name in tests:
                points.append({"n": n, "test_set": name, "error": f"{type(exc).__name__}: {exc}"})
    fits = {}
    for name in tests:
        series = [(p["n"], p["mse"]) for p in points if p["test_set"] == name and not p["error"]]
        try:
            fits[name] = fit_power_law(series, cfg.fit_range)
        except ValueError as exc:
            log.warning("no power-law fit for %s: %s", name, exc)
    return ScalingResult(points, fits, cfg.fit_range)


def _apply_standardization(train_labels, y_test):
    """Test targets standardized with the training statistics."""
    y = np.asarray(y_test, dtype=np.float64).reshape(len(y_test), -1)
    y = y[:, train_labels.tasks]
    mask = ~np.isnan(y)
    vals = np.where(mask, (np.nan_to_num(y) - train_labels.centering) / train_labels.scale, 0.0)
    return LabelSet(vals, mask, train_labels.centering, train_labels.scale, "regression", train_labels.tasks)
