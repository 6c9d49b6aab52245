"""CSV and log-log SVG outputs for scaling sweeps."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

COLUMNS = ["n", "test_set", "mse", "accuracy", "spearman", "mean_ap", "alpha_D", "intercept", "r_squared",
           "blocks_computed", "blocks_reused", "error"]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def result_rows(result) -> list:
    rows = []
    for p in result.points:
        rows.append({c: _cell(p.get(c)) for c in COLUMNS})
    for name in sorted(result.fits):
        f = result.fits[name]
        rows.append({**{c: "" for c in COLUMNS}, "n": "fit", "test_set": name, "alpha_D": _cell(f.alpha_D),
                     "intercept": _cell(f.intercept), "r_squared": _cell(f.r_squared)})
    return rows


def write_csv(result, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(result_rows(result))
    return path


def plot_svg(result, out_dir, metric: str = "mse") -> list:
    """One log-log plot per test set, with the fitted power law overlaid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "nkscale"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted({p["test_set"] for p in result.points}):
        pts = [(n, v) for n, v in result.series(name, metric) if v is not None and v > 0]
        if not pts:
            continue
        n, v = np.array(pts, dtype=float).T
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.plot(n, v, "o-", label=name)
        fit = result.fits.get(name)
        if fit is not None:
            grid = np.logspace(np.log10(n.min()), np.log10(n.max()), 50)
            ax.plot(grid, 10 ** fit.intercept * grid ** (-fit.alpha_D), "--",
                    label=f"alpha_D = {fit.alpha_D:.3f}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("training examples")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"scaling_{name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def report(result, out_dir) -> dict:
    out_dir = Path(out_dir)
    return {"csv": write_csv(result, out_dir / "scaling.csv"), "plots": plot_svg(result, out_dir)}
