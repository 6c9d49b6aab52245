"""Acceptance suite: one recorded PASS/FAIL line per criterion (see the terminal summary)."""

import os
import time
import warnings

import numpy as np
import pytest
import scipy.linalg

from conftest import make_store, naive_ap, naive_spearman, random_spd
from nkscale.fabric import Fabric, broadcast_volume, tcp_fabric
from nkscale.harness.metrics import accuracy, mean_average_precision, mse, spearman
from nkscale.harness.oracle import oracle_check
from nkscale.harness.scaling import ExperimentConfig, fit_power_law, scaling_run
from nkscale.harness.synthetic import powerlaw_spd, teacher_classification
from nkscale.kernels import ZCA_EPS, compute_kernel_matrix, preset
from nkscale.preprocess import one_hot_targets, zca_apply, zca_fit
from nkscale.solvers.approx import ApproxConfig, approx_predict
from nkscale.solvers.cg import cg_solve, regularized
from nkscale.solvers.cholesky import pivoted_cholesky_dense
from nkscale.store.compute import DataSource, compute_kernel
from nkscale.store.manifest import count_blocks


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# ---------------------------------------------------------------- kernel oracle


def test_kernel_oracle_suite(accept):
    t0 = time.perf_counter()
    rows = []
    for name in ("FC3", "CV8", "Myrtle", "SimpleGNN", "OneDimConv"):
        for kind in ("nngp", "ntk"):
            rows.append(oracle_check(name, kind))
    # the finite-difference Jacobian route, on the one preset where it fits the budget
    rows.append(oracle_check("FC3", "ntk", width=64, n_samples=40, jacobian="fd"))
    elapsed = time.perf_counter() - t0
    ok = all(r["passed"] for r in rows) and elapsed < 600
    worst = {k: max(r["rel_error"] for r in rows if r["kind"] == k) for k in ("nngp", "ntk")}
    accept("kernel-oracle", ok,
           f"max nngp err {worst['nngp']:.3%} (tol 5%), max ntk err {worst['ntk']:.3%} (tol 10%), "
           f"fd-route FC3 ntk {rows[-1]['rel_error']:.3%}, {elapsed:.0f}s")
    for r in rows:
        assert r["passed"], r
    assert elapsed < 600


# ---------------------------------------------------------------- solvers


def test_solver_exactness(tmp_path, accept):
    t0 = time.perf_counter()
    lam = 0.1
    worst = 0.0
    for n in (100, 500, 2000):
        A = random_spd(n, seed=n, ridge=0.0)
        b = np.random.default_rng(n).standard_normal((n, 2))
        exact = scipy.linalg.solve(A + lam * np.eye(n), b, assume_a="pos")
        P = pivoted_cholesky_dense(A, 100, lam)
        m = make_store(A, 256, True, tmp_path / f"n{n}")

        def check(matvec):
            nonlocal worst
            for pre in (None, P):
                rep = cg_solve(regularized(matvec, lam), b, pre, tol=1e-10, max_iter=5000)
                worst = max(worst, _rel(rep.solution, exact))

        check(lambda v: A @ v)
        for workers in (1, 8):
            with Fabric.threads(m, workers) as fab:
                check(fab.matvec)
            with tcp_fabric(m, workers) as fab:
                check(fab.matvec)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 120
    accept("solver-exactness", ok, f"max rel error {worst:.2e} (tol 1e-8), {elapsed:.0f}s")
    assert worst <= 1e-8
    assert elapsed < 120


def test_preconditioner_value(accept):
    t0 = time.perf_counter()
    lam, counts = 1e-6, []
    for seed in range(3):
        K = powerlaw_spd(2000, seed=seed)
        b = np.random.default_rng(seed + 10).standard_normal(2000)
        op = regularized(lambda v: K @ v, lam)
        plain = cg_solve(op, b, tol=1e-6, max_iter=5000)
        pre = cg_solve(op, b, pivoted_cholesky_dense(K, 200, lam), tol=1e-6, max_iter=5000)
        counts.append((pre.iterations, plain.iterations, pre.converged))
    elapsed = time.perf_counter() - t0
    ok = all(p < q and c for p, q, c in counts) and elapsed < 120
    accept("preconditioner-value", ok,
           "iterations (precond, plain) " + ", ".join(f"({p}, {q})" for p, q, _ in counts) + f", {elapsed:.0f}s")
    assert ok


def test_degenerate_equivalences(accept):
    t0 = time.perf_counter()
    n, m = 120, 30
    J = random_spd(n + m, seed=5, ridge=0.05)
    K, Kt, Ktt = J[:n, :n], J[n:, :n], J[n:, n:]
    y = np.random.default_rng(5).standard_normal((n, 3))
    errs = {}
    lam = 1e-2
    exact = Kt @ np.linalg.solve(K + lam * np.eye(n), y)
    for method in ("nystrom", "block_diag", "bcm"):
        errs[method] = _rel(approx_predict(ApproxConfig(method, n, seed=1, jitter=lam), K, Kt, y, Ktt), exact)
    # subset of regressors only coincides with the exact solve as lam -> 0+
    tiny = 1e-10
    exact0 = Kt @ np.linalg.solve(K + tiny * np.eye(n), y)
    errs["sor"] = _rel(approx_predict(ApproxConfig("sor", n, seed=1, jitter=tiny), K, Kt, y), exact0)
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-8 and elapsed < 60
    accept("degenerate-equivalences", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (tol 1e-8)")
    assert ok


# ---------------------------------------------------------------- approximate-solver ordering


_LAMBDAS = (1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


def test_approximation_ordering(accept):
    t0 = time.perf_counter()
    x, y, xt, yt = teacher_classification(2500, 1000, dim=16, n_classes=4, hidden=64, seed=0)
    X, labels = np.concatenate([x, xt]), np.concatenate([y, yt])
    K_all = compute_kernel_matrix(preset("FC3", "ntk"), X)
    tr, va, te = np.arange(2000), np.arange(2000, 2500), np.arange(2500, 3500)
    K = K_all[np.ix_(tr, tr)]
    scale = np.trace(K) / len(K)
    Y = one_hot_targets(labels[tr], 4)

    def predict(method, r, seed, lam, rows):
        Kt = K_all[np.ix_(rows, tr)]
        if method == "exact":
            return Kt @ scipy.linalg.solve(K + lam * scale * np.eye(len(K)), Y, assume_a="pos")
        cfg = ApproxConfig(method, r, seed=seed, jitter=lam * scale)
        return approx_predict(cfg, K, Kt, Y, K_all[np.ix_(rows, rows)])

    def error(method, r=0, seed=0):
        # regularization picked on the validation rows, error reported on the test rows
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            val = {lam: np.mean(predict(method, r, seed, lam, va).argmax(1) != labels[va]) for lam in _LAMBDAS}
            best = min(val, key=val.get)
            return float(np.mean(predict(method, r, seed, best, te).argmax(1) != labels[te]))

    methods = ("sor", "nystrom", "bcm", "block_diag")
    err = {(mth, r): np.mean([error(mth, r, s) for s in range(5)]) for r in (50, 100, 200, 800) for mth in methods}
    exact = error("exact")
    elapsed = time.perf_counter() - t0

    at100 = {mth: err[mth, 100] for mth in methods}
    monotone = {mth: err[mth, 50] >= err[mth, 200] >= err[mth, 800] for mth in methods}
    hard = exact <= at100["sor"] and at100["bcm"] <= at100["block_diag"] and all(monotone.values())
    low_rank_beats_bcm = max(at100["sor"], at100["nystrom"]) <= at100["bcm"]
    detail = (f"r=100 errors exact {exact:.3f}, " + ", ".join(f"{k} {v:.3f}" for k, v in at100.items())
              + f"; monotone in r {all(monotone.values())}; sor/nystrom <= bcm {low_rank_beats_bcm}; {elapsed:.0f}s")
    accept("approximation-ordering", hard and low_rank_beats_bcm and elapsed < 600, detail)
    assert exact <= at100["sor"]
    assert at100["bcm"] <= at100["block_diag"]
    assert all(monotone.values()), err
    assert elapsed < 600
    if not low_rank_beats_bcm:
        pytest.xfail("committee beats the r=100 low-rank methods on this task: " + detail)


# ---------------------------------------------------------------- block store and fabric


def _preempt_each_worker(marker_dir):
    def fault(owner, n_done, tmp):
        flag = os.path.join(marker_dir, owner)
        if n_done == 1 and not os.path.exists(flag):
            open(flag, "w").close()
            os._exit(3)
    return fault


def test_block_store_integrity(tmp_path, accept):
    t0 = time.perf_counter()
    arch = preset("FC3")
    data = DataSource(np.random.default_rng(3).standard_normal((1000, 10)))
    single = compute_kernel(tmp_path / "single", arch, data, block_size=170)
    marks = tmp_path / "marks"
    marks.mkdir()
    fault = _preempt_each_worker(str(marks))
    root = tmp_path / "sharded"
    m = compute_kernel(root, arch, data, block_size=170, workers=4, fault=fault, ttl=0.5)
    restarts = 0
    while not m.complete and restarts < 5:
        m = compute_kernel(root, arch, data, block_size=170, workers=4, fault=fault, ttl=0.5)
        restarts += 1
    identical = m.complete and all(
        m.block_path(m.block(*ref.coords)).read_bytes() == single.block_path(ref).read_bytes()
        for ref in single.blocks)
    killed = len(os.listdir(marks))
    big = count_blocks(5_000_000, 5_000_000, 5000, True)
    elapsed = time.perf_counter() - t0
    ok = identical and killed == 4 and big == 500_500 and elapsed < 120
    accept("block-store-integrity", ok,
           f"{len(single.blocks)} blocks byte-identical {identical}, workers killed {killed}, "
           f"restarts {restarts}, 5M/5000 plan {big} blocks, {elapsed:.0f}s")
    assert ok


def test_communication_volume(tmp_path, accept):
    K = np.random.default_rng(0).standard_normal((1000, 1000))
    m = make_store(K, 500, False, tmp_path)
    with Fabric.threads(m, 4) as fab:
        fab.matvec(np.ones(1000))
        pushed = fab.last_segment_bytes
    base = broadcast_volume(4, 1000, 1)
    accept("communication-volume", 2 * pushed == base, f"pushed {pushed} bytes, broadcast {base} bytes")
    assert 2 * pushed == base


# ---------------------------------------------------------------- harness


def test_scaling_harness(tmp_path, accept):
    t0 = time.perf_counter()
    n = np.array([16, 32, 64, 128, 256, 512, 1024, 2048, 4096], dtype=float)
    exact = fit_power_law(np.column_stack([n, 3.0 * n**-0.5])).alpha_D
    noisy = []
    for seed in range(5):
        grid = np.logspace(1, 4, 10)
        loss = grid**-0.3 * np.random.default_rng(seed).lognormal(0.0, 0.05, grid.size)
        noisy.append(fit_power_law(np.column_stack([grid, loss])).alpha_D)

    cfg = ExperimentConfig(
        arch="FC3", kernel_kind="nngp",
        train={"builtin": "digits", "split": "train", "n_test": 500},
        tests={"digits": {"builtin": "digits", "split": "test", "n_test": 500}},
        sizes=[16, 32, 64, 128, 256, 512, 1024], block_size=128,
        solver={"method": "cg", "jitter": 1e-6, "tol": 1e-8})
    res = scaling_run(cfg, tmp_path)
    series = res.series("digits", "mse")
    losses = [v for _, v in series]
    monotone = all(b <= a for a, b in zip(losses, losses[1:]))
    upper = fit_power_law(series, (64, None))
    elapsed = time.perf_counter() - t0
    ok = (abs(exact - 0.5) <= 1e-12 and all(abs(a - 0.3) <= 0.05 for a in noisy) and len(series) == 7
          and monotone and upper.r_squared >= 0.9 and elapsed < 900)
    accept("scaling-harness", ok,
           f"exact alpha {exact:.12f}, noisy alpha {min(noisy):.3f}..{max(noisy):.3f}, digits mse monotone "
           f"{monotone}, upper fit alpha {upper.alpha_D:.3f} r2 {upper.r_squared:.4f}, {elapsed:.0f}s")
    assert ok, series


def test_zca(accept):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((600, 8, 8, 3)) * rng.uniform(0.1, 3.0, (8, 8, 3)) + 0.5
    w = zca_apply(zca_fit(x, 0.0), x).reshape(600, -1)
    w = w - w.mean(axis=0)
    dev = float(np.max(np.abs(w.T @ w / len(w) - np.eye(192))))
    eps = {k: ZCA_EPS[k] for k in ("CV8", "Myrtle")}
    ok = dev <= 1e-6 and eps == {"CV8": 3.0, "Myrtle": 0.1}
    accept("zca", ok, f"max |cov - I| {dev:.1e} (tol 1e-6), preset eps {eps}")
    assert ok


def test_metrics(accept):
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    worst = 0.0
    for case in range(100):
        n, T = int(rng.integers(4, 40)), int(rng.integers(1, 4))
        x = rng.integers(0, 5, n).astype(float) if case % 3 == 0 else rng.standard_normal(n)
        y = rng.standard_normal(n)
        if np.ptp(x) > 0:
            worst = max(worst, abs(spearman(x, y) - naive_spearman(x, y)))
        P = rng.standard_normal((n, T + 1))
        lab = rng.integers(0, T + 1, n)
        worst = max(worst, abs(accuracy(P, lab) - sum(np.argmax(P[i]) == lab[i] for i in range(n)) / n))
        Y = rng.standard_normal((n, T + 1))
        mask = rng.random((n, T + 1)) < 0.7
        mask[0] = True
        sq = [(P[i, t] - Y[i, t]) ** 2 for i in range(n) for t in range(T + 1) if mask[i, t]]
        worst = max(worst, abs(mse(P, Y, mask) - sum(sq) / len(sq)))
        scores = rng.integers(0, 4, (n, T)).astype(float) if case % 2 else rng.standard_normal((n, T))
        pos = rng.random((n, T)) < 0.4
        pos[0] = True
        amask = rng.random((n, T)) < 0.8
        amask[0] = True
        aps = [naive_ap(scores[amask[:, t], t], pos[amask[:, t], t]) for t in range(T)
               if pos[amask[:, t], t].any()]
        worst = max(worst, abs(mean_average_precision(scores, pos, amask) - sum(aps) / len(aps)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    accept("metrics", ok, f"max deviation from brute force {worst:.1e} over 100 cases (tol 1e-12), {elapsed:.1f}s")
    assert ok


def test_augmentation_trend(tmp_path, accept):
    t0 = time.perf_counter()
    n, errors = 64, {1: [], 2: []}
    for seed in range(3):
        for factor in (1, 2):
            cfg = ExperimentConfig(
                arch="CV8", kernel_kind="nngp",
                train={"synthetic": "images", "n": n, "seed": seed, "noise": 3.0},
                tests={"held": {"synthetic": "images", "n": 300, "offset": n, "seed": seed, "noise": 3.0}},
                augment=factor, seed=seed, sizes=[n * factor], block_size=128,
                solver={"method": "direct", "jitter": 1e-3})
            res = scaling_run(cfg, tmp_path / f"s{seed}_f{factor}")
            errors[factor].append(1.0 - res.series("held", "accuracy")[0][1])
    med = {f: float(np.median(v)) for f, v in errors.items()}
    elapsed = time.perf_counter() - t0
    ok = med[2] <= med[1] and elapsed < 900
    accept("augmentation-trend", ok,
           f"median test error factor 1 {med[1]:.3f}, factor 2 {med[2]:.3f} over 3 seeds, {elapsed:.0f}s")
    assert ok
