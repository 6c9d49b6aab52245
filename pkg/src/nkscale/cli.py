"""Command-line entry point: ``nkscale <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from nkscale.errors import DimensionError

log = logging.getLogger("nkscale")


def _threads() -> int:
    return max(1, int(os.environ.get("NK_THREADS", os.cpu_count() or 1)))


def _read_labels(path, task):
    from nkscale.preprocess import make_labels
    from nkscale.tensorio import read_labels

    raw = read_labels(path)
    if task == "classification":
        return make_labels(raw[:, 0], "classification"), raw[:, 0].astype(int)
    return make_labels(raw, task), None


def _matvec(manifest, workers: str | None, threads: int | None):
    """(matvec, closer) over a store: TCP workers, worker threads, or direct streaming."""
    from nkscale.fabric import Fabric
    from nkscale.store.access import matvec_from_store

    if workers:
        fab = Fabric.tcp(manifest, [w.strip() for w in workers.split(",") if w.strip()])
        return fab.matvec, fab.close
    if threads and threads > 1:
        fab = Fabric.threads(manifest, threads)
        return fab.matvec, fab.close
    return (lambda v: matvec_from_store(manifest, v, _threads())), (lambda: None)


# ---------------------------------------------------------------- subcommands


def cmd_compute_kernel(a):
    from nkscale.kernels.layers import load_arch
    from nkscale.store.compute import DataSource, compute_kernel, parse_block_filter
    from nkscale.tensorio import read_tensor

    arch = load_arch(a.arch, a.kind)
    rows = read_tensor(a.data)
    cols = None if a.cols is None else read_tensor(a.cols)
    if a.symmetric and cols is not None:
        raise SystemExit("--symmetric cannot be combined with --cols")
    adj = None if a.adj is None else read_tensor(a.adj)
    adj_cols = None if a.adj_cols is None else read_tensor(a.adj_cols)
    data = DataSource(rows, cols, adj, adj_cols)
    m = compute_kernel(a.out, arch, data, a.block_size, min(a.workers, _threads()) if a.workers else 1,
                       a.batch, parse_block_filter(a.block_filter), a.preprocessing or "")
    done = len(m.blocks) - len(m.pending())
    print(json.dumps({"store": str(a.out), "blocks": len(m.blocks), "complete": done, "kernel_id": m.kernel_id}))
    return 0


def cmd_solve(a):
    from nkscale.solvers.cg import cg_solve, regularized
    from nkscale.solvers.cholesky import pivoted_cholesky
    from nkscale.store.access import StoreKernel
    from nkscale.store.blockfile import write_block_file
    from nkscale.store.manifest import load_manifest

    m = load_manifest(a.manifest)
    labels, _ = _read_labels(a.labels, a.task)
    if labels.values.shape[0] != m.n_rows:
        raise DimensionError(f"{labels.values.shape[0]} labels for a {m.n_rows}-row kernel")
    P = None
    if a.precond_rank > 0:
        sk = StoreKernel(m, cache_blocks=max(16, m.grid[1]))
        P = pivoted_cholesky(sk.diag(), sk.row, min(a.precond_rank, m.n_rows), a.jitter)
    matvec, close = _matvec(m, a.workers, a.threads)
    try:
        mask = None if labels.mask.all() else labels.mask
        rep = cg_solve(regularized(matvec, a.jitter), labels.values, P, a.tol, a.max_iter, mask=mask)
    finally:
        close()
    write_block_file(a.out, rep.solution.reshape(m.n_rows, -1))
    meta = {"mode": labels.mode, "centering": labels.centering.tolist(), "scale": labels.scale.tolist(),
            "tasks": labels.tasks.tolist(), "jitter": a.jitter, "iterations": rep.iterations,
            "converged": rep.converged, "final_residuals": [r[-1] for r in rep.residuals]}
    Path(str(a.out) + ".json").write_text(json.dumps(meta, indent=1))
    print(json.dumps({k: meta[k] for k in ("iterations", "converged", "final_residuals")}))
    return 0 if rep.converged else 3


def cmd_predict(a):
    from nkscale.harness.metrics import evaluate
    from nkscale.preprocess import LabelSet, make_labels
    from nkscale.solvers.predict import decode_classes
    from nkscale.store.blockfile import read_block_file
    from nkscale.store.manifest import load_manifest

    m = load_manifest(a.manifest)
    alpha, _ = read_block_file(a.alpha)
    meta_path = Path(str(a.alpha) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"mode": "regression"}
    matvec, close = _matvec(m, a.workers, a.threads)
    try:
        pred = matvec(alpha)
    finally:
        close()
    mode = meta["mode"]
    out = pred
    if mode == "regression" and "scale" in meta:
        out = pred * np.asarray(meta["scale"]) + np.asarray(meta["centering"])
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f"task{t}" for t in range(out.shape[1])] + (["class"] if mode == "classification" else [])
        w.writerow(header)
        cls = decode_classes(pred) if mode == "classification" else None
        for k, row in enumerate(out):
            w.writerow([repr(float(v)) for v in row] + ([int(cls[k])] if cls is not None else []))
    if a.labels:
        from nkscale.tensorio import read_labels

        raw = read_labels(a.labels)
        if mode == "classification":
            ids = raw[:, 0].astype(int)
            metrics = evaluate(pred, make_labels(ids, "classification", pred.shape[1]), class_ids=ids)
        else:
            y = raw[:, meta.get("tasks", list(range(raw.shape[1])))]
            mask = ~np.isnan(y)
            c, s = np.asarray(meta["centering"]), np.asarray(meta["scale"])
            labels = LabelSet(np.where(mask, (np.nan_to_num(y) - c) / s, 0.0), mask, c, s, "regression")
            metrics = evaluate(pred, labels)
        print(json.dumps(metrics))
    return 0


def cmd_approx(a):
    from nkscale.harness.metrics import evaluate
    from nkscale.preprocess import make_labels
    from nkscale.solvers.approx import ApproxConfig, approx_predict
    from nkscale.store.access import StoreKernel
    from nkscale.store.manifest import load_manifest

    cfg = ApproxConfig(a.method, a.size, a.seed, a.jitter)
    K = StoreKernel(load_manifest(a.manifest))
    Kt = StoreKernel(load_manifest(a.test))
    Ktt = StoreKernel(load_manifest(a.test_test)) if a.test_test else None
    labels, _ = _read_labels(a.labels, a.task)
    if not labels.mask.all():
        raise SystemExit("approximate methods need fully observed labels")
    pred = approx_predict(cfg, K, Kt, labels.values, Ktt)
    row = {"method": cfg.method, "size": cfg.size, "seed": cfg.seed, "jitter": cfg.jitter}
    if a.test_labels:
        from nkscale.tensorio import read_labels

        raw = read_labels(a.test_labels)
        if a.task == "classification":
            ids = raw[:, 0].astype(int)
            row.update(evaluate(pred, make_labels(ids, "classification", pred.shape[1]), class_ids=ids))
        else:
            from nkscale.harness.scaling import _apply_standardization

            row.update(evaluate(pred, _apply_standardization(labels, raw)))
    out = Path(a.out)
    new = not out.exists()
    with open(out, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)
    print(json.dumps(row))
    return 0


def cmd_scaling(a):
    from nkscale.harness.report import report
    from nkscale.harness.scaling import ExperimentConfig, scaling_run

    cfg = ExperimentConfig.from_json(a.config)
    out = Path(a.out or cfg.out_dir)
    res = scaling_run(cfg, out)
    paths = report(res, out)
    print(json.dumps({"csv": str(paths["csv"]), "alpha_D": res.alpha_D}))
    return 0


def cmd_oracle_check(a):
    from nkscale.harness.oracle import oracle_check

    kinds = ["nngp", "ntk"] if a.kind == "both" else [a.kind]
    ok = True
    for name in a.arch:
        for kind in kinds:
            r = oracle_check(name, kind, a.seed, a.width, a.samples, a.jacobian)
            ok &= r["passed"]
            print(f"{'PASS' if r['passed'] else 'FAIL'} {r['preset']} {kind}: rel_error={r['rel_error']:.4f} "
                  f"(tol {r['tol']}, width {r['width']}, {r['samples']} samples, {r['seconds']:.1f}s)")
    return 0 if ok else 1


def cmd_worker(a):
    from nkscale.fabric.worker import serve_tcp

    def ready(addr):
        print(f"listening on {addr}", flush=True)

    serve_tcp(a.listen, a.blocks, a.in_memory, ready)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nkscale", description="Neural-kernel regression at scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("compute-kernel", help="compute a block-sharded kernel store")
    s.add_argument("--arch", required=True, help="preset name or architecture JSON file")
    s.add_argument("--kind", choices=("nngp", "ntk"), default=None)
    s.add_argument("--data", required=True, help="row inputs (tensor file)")
    s.add_argument("--cols", help="column inputs; omit for the symmetric train-train kernel")
    s.add_argument("--adj", help="row adjacency tensor (graph presets)")
    s.add_argument("--adj-cols", help="column adjacency tensor")
    s.add_argument("--out", required=True)
    s.add_argument("--block-size", type=int, default=5000)
    s.add_argument("--symmetric", action="store_true")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--block-filter")
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--preprocessing", help="free-form tag folded into the kernel id")
    s.set_defaults(func=cmd_compute_kernel)

    def fabric_flags(s):
        s.add_argument("--workers", help="comma-separated host:port worker addresses")
        s.add_argument("--threads", type=int, help="in-process fabric workers")

    s = sub.add_parser("solve", help="solve (K + jitter I) alpha = y with preconditioned CG")
    s.add_argument("--manifest", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--task", choices=("classification", "regression"), default="classification")
    s.add_argument("--jitter", type=float, default=1e-6)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--precond-rank", type=int, default=100)
    s.add_argument("--max-iter", type=int, default=1000)
    s.add_argument("--out", default="alpha.bin")
    fabric_flags(s)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("predict", help="test predictions K_* alpha")
    s.add_argument("--manifest", required=True, help="test-train kernel store")
    s.add_argument("--alpha", required=True)
    s.add_argument("--out", default="preds.csv")
    s.add_argument("--labels", help="test labels, to print metrics")
    fabric_flags(s)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("approx", help="approximate solvers")
    s.add_argument("--method", required=True, choices=("nystrom", "sor", "block-diag", "bcm"))
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jitter", type=float, default=1e-6)
    s.add_argument("--manifest", required=True, help="train-train kernel store")
    s.add_argument("--labels", required=True)
    s.add_argument("--test", required=True, help="test-train kernel store")
    s.add_argument("--test-test", help="test-test kernel store (bcm)")
    s.add_argument("--test-labels")
    s.add_argument("--task", choices=("classification", "regression"), default="classification")
    s.add_argument("--out", default="approx_metrics.csv")
    s.set_defaults(func=cmd_approx)

    s = sub.add_parser("scaling", help="dataset-size scaling sweep from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_scaling)

    s = sub.add_parser("oracle-check", help="analytic kernels against Monte-Carlo estimates")
    s.add_argument("--arch", nargs="+", default=["FC3", "CV8", "Myrtle", "SimpleGNN", "OneDimConv"])
    s.add_argument("--kind", choices=("nngp", "ntk", "both"), default="both")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--jacobian", choices=("autodiff", "fd"), default="autodiff")
    s.set_defaults(func=cmd_oracle_check)

    s = sub.add_parser("worker", help="serve block x segment products over TCP")
    s.add_argument("--listen", required=True, help="host:port (port 0 picks a free port)")
    s.add_argument("--blocks", required=True, help="kernel store directory")
    s.add_argument("--in-memory", action="store_true")
    s.set_defaults(func=cmd_worker)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
