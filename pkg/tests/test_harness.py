import csv
import itertools
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import naive_ap, naive_spearman
from nkscale.cli import main
from nkscale.harness.metrics import accuracy, average_precision, evaluate, mean_average_precision, mse, spearman
from nkscale.harness.report import COLUMNS, report
from nkscale.harness.scaling import ExperimentConfig, PrefixStore, fit_power_law, log_sizes, scaling_run
from nkscale.kernels.layers import preset
from nkscale.preprocess import make_labels
from nkscale.tensorio import read_labels, read_tensor, write_labels, write_tensor


# ---------------------------------------------------------------- power-law fits


def test_exact_power_law():
    n = np.array([16, 64, 256, 1024, 4096])
    fit = fit_power_law(np.column_stack([n, 5 * n**-0.5]))
    assert fit.alpha_D == pytest.approx(0.5, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(np.log10(5), abs=1e-12)


def test_constant_loss():
    fit = fit_power_law([(10, 2.0), (100, 2.0), (1000, 2.0)])
    assert fit.alpha_D == pytest.approx(0.0, abs=1e-12)


def test_noisy_power_law():
    rng = np.random.default_rng(0)
    n = np.logspace(1, 4, 10)
    fit = fit_power_law(np.column_stack([n, n**-0.3 * rng.lognormal(0, 0.05, 10)]))
    assert abs(fit.alpha_D - 0.3) <= 0.05


def test_fit_range_and_errors():
    pts = [(10, 1.0), (100, 0.1), (1000, 0.05), (10000, 0.025)]
    fit = fit_power_law(pts, (100, None))
    assert fit.n_points == 3
    with pytest.raises(ValueError):
        fit_power_law(pts[:2])
    with pytest.raises(ValueError):
        fit_power_law([(1, 1.0), (2, 0.0), (3, 1.0)])


def test_log_sizes():
    assert log_sizes(16, 4096, 2)[0] == 16 and log_sizes(16, 4096, 2)[-1] == 4096
    with pytest.raises(ValueError):
        ExperimentConfig(sizes=[64, 16])


# ---------------------------------------------------------------- metrics against brute force


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for case in range(100):
        n = int(rng.integers(3, 30))
        # integer-valued draws create ties
        x = rng.integers(0, 6, n).astype(float) if case % 2 else rng.standard_normal(n)
        y = rng.standard_normal(n)
        if np.ptp(x) > 0:
            assert spearman(x, y) == pytest.approx(naive_spearman(x, y), abs=1e-12)
        pos = rng.random(n) < 0.4
        pos[0] = True
        assert average_precision(x, pos) == pytest.approx(naive_ap(x, pos), abs=1e-12)
        P = rng.standard_normal((n, 3))
        lab = rng.integers(0, 3, n)
        assert accuracy(P, lab) == pytest.approx(np.mean([np.argmax(P[i]) == lab[i] for i in range(n)]), abs=1e-12)
        T = rng.standard_normal((n, 3))
        mask = rng.random((n, 3)) < 0.7
        brute = np.mean([(P[i, t] - T[i, t]) ** 2 for i in range(n) for t in range(3) if mask[i, t]])
        assert mse(P, T, mask) == pytest.approx(brute, abs=1e-12)


def test_metric_examples():
    assert spearman([1, 2, 3, 4], [10, 20, 25, 100]) == pytest.approx(1.0)
    assert average_precision([0.9, 0.8, 0.1], [True, False, True]) == pytest.approx(5 / 6)
    y = np.array([0, 2, 1])
    lab = make_labels(y, "classification", 3)
    m = evaluate(lab.values, lab, class_ids=y)
    assert m["accuracy"] == 1.0 and m["mse"] == 0.0
    assert average_precision([0.3, 0.2], [True, True]) == 1.0


def test_mean_ap_skips_empty_tasks():
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.4]])
    pos = np.array([[True, False], [False, False], [True, False]])
    with pytest.warns(RuntimeWarning):
        assert mean_average_precision(scores, pos) == pytest.approx(1.0)
    mask = np.array([[True, True], [True, True], [False, True]])
    assert mean_average_precision(scores[:, :1], pos[:, :1], mask[:, :1]) == pytest.approx(1.0)


def test_regression_evaluate_uses_raw_scale():
    y = np.array([[1.0, np.nan], [3.0, 2.0], [5.0, 4.0], [7.0, 6.0]])
    lab = make_labels(y)
    pred = lab.values + 0.5 / lab.scale  # off by 0.5 on the raw scale
    m = evaluate(pred, lab)
    assert m["mse"] == pytest.approx(0.25)
    assert m["spearman"] == pytest.approx(1.0)


# ---------------------------------------------------------------- sweeps and reports


def _config(tmp_path, sizes=(16, 32, 64, 128), **kw):
    base = dict(
        arch="FC3",
        train={"synthetic": "teacher", "n": max(sizes), "dim": 8, "hidden": None},
        tests={"held": {"synthetic": "teacher", "n": 100, "offset": 1000, "dim": 8, "hidden": None}},
        sizes=list(sizes),
        block_size=32,
        solver={"jitter": 1e-4, "tol": 1e-10, "max_iter": 2000},
        out_dir=str(tmp_path),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_nested_prefix_reuse(tmp_path):
    cfg = _config(tmp_path)
    res = scaling_run(cfg, tmp_path / "run")
    pts = {p["n"]: p for p in res.points}
    # train store: 4x4 symmetric grid of 32-blocks; test store: 4 block columns, 4 block rows
    assert pts[16]["blocks_computed"] == 1 + 4 and pts[16]["blocks_reused"] == 0
    assert pts[32]["blocks_computed"] == 0 and pts[32]["blocks_reused"] == 1 + 4
    assert pts[64]["blocks_computed"] == 2 + 4 and pts[64]["blocks_reused"] == 1 + 4
    assert pts[128]["blocks_reused"] == 3 + 8


def test_report_format_and_determinism(tmp_path):
    outs = []
    for k in range(2):
        cfg = _config(tmp_path / f"r{k}")
        res = scaling_run(cfg, tmp_path / f"r{k}")
        paths = report(res, tmp_path / f"r{k}")
        outs.append(paths["csv"].read_bytes())
        svg = paths["plots"][0].read_text()
        assert "<svg" in svg
    assert outs[0] == outs[1]
    rows = list(csv.DictReader(outs[0].decode().splitlines()))
    assert list(rows[0]) == COLUMNS
    assert rows[0]["spearman"] == ""  # not computed for classification
    fit_rows = [r for r in rows if r["n"] == "fit"]
    assert len(fit_rows) == 1 and fit_rows[0]["alpha_D"] != ""


def test_plot_axes_log(tmp_path):
    import matplotlib

    matplotlib.use("Agg")
    from unittest import mock

    import matplotlib.axes

    cfg = _config(tmp_path)
    res = scaling_run(cfg, tmp_path)
    with mock.patch.object(matplotlib.axes.Axes, "set_xscale", autospec=True,
                           side_effect=matplotlib.axes.Axes.set_xscale) as xs, \
            mock.patch.object(matplotlib.axes.Axes, "set_yscale", autospec=True,
                              side_effect=matplotlib.axes.Axes.set_yscale) as ys:
        report(res, tmp_path / "plots")
    assert xs.call_args.args[1] == "log" and ys.call_args.args[1] == "log"


def test_sweep_records_failures(tmp_path):
    cfg = _config(tmp_path, solver={"method": "direct", "jitter": -10.0, "relative_jitter": False})
    res = scaling_run(cfg, tmp_path)
    assert all(p["error"] for p in res.points)


def test_accuracy_nondecreasing_on_separable_data(tmp_path):
    sizes = [16, 64, 256, 1024, 4096]
    cfg = _config(tmp_path, sizes=sizes, block_size=512,
                  train={"synthetic": "teacher", "n": 4096, "dim": 8, "hidden": None},
                  tests={"held": {"synthetic": "teacher", "n": 500, "offset": 5000, "dim": 8, "hidden": None}},
                  solver={"jitter": 1e-4, "tol": 1e-8})
    res = scaling_run(cfg, tmp_path)
    acc = [a for _, a in res.series("held", "accuracy")]
    assert len(acc) == 5
    assert all(b >= a for a, b in itertools.pairwise(acc)), acc


def test_prefix_store_counts(tmp_path):
    x = np.random.default_rng(0).standard_normal((20, 3))
    ps = PrefixStore(tmp_path, preset("FC3"), x, None, 8)
    assert ps.ensure(8, 8) == (1, 0)
    assert ps.ensure(20, 20) == (5, 1)
    K = ps.prefix(12, 12)
    assert K.shape == (12, 12)


# ---------------------------------------------------------------- CLI


def _write_problem(tmp_path, n=40, m=10):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n + m, 5))
    y = (x[:, 0] > 0).astype(int) + (x[:, 1] > 0).astype(int)
    write_tensor(tmp_path / "train.nkt", x[:n])
    write_tensor(tmp_path / "test.nkt", x[n:])
    write_labels(tmp_path / "train.csv", y[:n])
    write_labels(tmp_path / "test.csv", y[n:])
    return x, y


def test_tensor_and_label_roundtrip(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 2, 4))
    write_tensor(tmp_path / "a.nkt", a)
    assert np.array_equal(read_tensor(tmp_path / "a.nkt"), a)
    y = np.array([[1.0, np.nan], [2.5, 3.0]])
    write_labels(tmp_path / "y.csv", y)
    np.testing.assert_array_equal(read_labels(tmp_path / "y.csv"), y)


def test_cli_pipeline(tmp_path, capsys):
    _write_problem(tmp_path)
    d = str(tmp_path)
    assert main(["compute-kernel", "--arch", "fc3", "--data", f"{d}/train.nkt", "--out", f"{d}/ktt",
                 "--block-size", "16", "--symmetric"]) == 0
    assert main(["compute-kernel", "--arch", "fc3", "--data", f"{d}/test.nkt", "--cols", f"{d}/train.nkt",
                 "--out", f"{d}/kst", "--block-size", "16"]) == 0
    assert main(["compute-kernel", "--arch", "fc3", "--data", f"{d}/test.nkt", "--out", f"{d}/kss",
                 "--block-size", "16", "--symmetric"]) == 0
    assert main(["solve", "--manifest", f"{d}/ktt", "--labels", f"{d}/train.csv", "--jitter", "1e-3",
                 "--tol", "1e-10", "--out", f"{d}/alpha.bin", "--threads", "2"]) == 0
    capsys.readouterr()
    assert main(["predict", "--manifest", f"{d}/kst", "--alpha", f"{d}/alpha.bin", "--out", f"{d}/p.csv",
                 "--labels", f"{d}/test.csv"]) == 0
    metrics = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0 <= metrics["accuracy"] <= 1
    rows = list(csv.reader(open(f"{d}/p.csv")))
    assert rows[0][-1] == "class" and len(rows) == 11
    for method in ("nystrom", "sor", "block-diag", "bcm"):
        assert main(["approx", "--method", method, "--size", "10", "--jitter", "1e-3", "--manifest", f"{d}/ktt",
                     "--labels", f"{d}/train.csv", "--test", f"{d}/kst", "--test-test", f"{d}/kss",
                     "--test-labels", f"{d}/test.csv", "--out", f"{d}/approx.csv"]) == 0
    assert len(list(csv.DictReader(open(f"{d}/approx.csv")))) == 4


def test_cli_scaling(tmp_path, capsys):
    cfg = _config(tmp_path, sizes=[16, 32, 64])
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert main(["scaling", "--config", str(path), "--out", str(tmp_path / "out")]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert "held" in out["alpha_D"]
    assert (tmp_path / "out" / "scaling.csv").exists()


def test_cli_oracle_and_module_entry(capsys):
    assert main(["oracle-check", "--arch", "FC3", "--kind", "nngp", "--width", "512", "--samples", "20"]) in (0, 1)
    assert "FC3 nngp" in capsys.readouterr().out
    r = subprocess.run([sys.executable, "-m", "nkscale", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "scaling" in r.stdout
