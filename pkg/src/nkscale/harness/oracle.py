"""Analytic-versus-Monte-Carlo kernel checks on small random inputs."""

from __future__ import annotations

import time

import numpy as np

from nkscale.kernels.analytic import compute_kernel_matrix
from nkscale.kernels.empirical import empirical_kernel_oracle
from nkscale.kernels.layers import preset, preset_name

NNGP_TOL = 0.05
NTK_TOL = 0.10

# (width, samples) for the finite-width NTK; conv nets need width >= 128 for a small bias
NTK_BUDGET = {
    "FC3": (256, 50),
    "CV8": (128, 30),
    "Myrtle": (256, 30),
    "TunedMyrtle": (256, 30),
    "OneDimConv": (128, 30),
    "SimpleGNN": (256, 50),
}


def oracle_inputs(name: str, seed: int = 0):
    """Small inputs matching a preset: returns ``(x, adjacency or None)``."""
    name = preset_name(name)
    rng = np.random.default_rng(seed)
    if name == "FC3":
        return rng.standard_normal((10, 16)), None
    if name in ("CV8", "Myrtle", "TunedMyrtle"):
        return rng.standard_normal((4, 8, 8, 3)), None
    if name == "OneDimConv":
        return rng.standard_normal((5, 20, 4)), None
    if name == "SimpleGNN":
        x = rng.standard_normal((6, 5, 3))
        adj = np.triu((rng.random((6, 5, 5)) < 0.4).astype(float), 1)
        return x, adj + adj.transpose(0, 2, 1)
    raise ValueError(f"no oracle inputs for {name!r}")


def relative_error(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def oracle_check(name: str, kind: str = "nngp", seed: int = 0, width: int | None = None,
                 n_samples: int | None = None, jacobian: str = "autodiff") -> dict:
    """Relative Frobenius error of the analytic kernel against its Monte-Carlo estimate."""
    arch = preset(name, kind)
    x, adj = oracle_inputs(name, seed)
    if kind == "nngp":
        width, n_samples = width or 4096, n_samples or 200
        tol, kw = NNGP_TOL, {}
    else:
        dw, ds = NTK_BUDGET[preset_name(name)]
        width, n_samples = width or dw, n_samples or ds
        tol, kw = NTK_TOL, {"jacobian": jacobian}
    t0 = time.perf_counter()
    K = compute_kernel_matrix(arch, x, adj1=adj)
    E = empirical_kernel_oracle(arch, x, width=width, n_samples=n_samples, seed=seed + 1, adj1=adj, **kw)
    err = relative_error(E, K)
    return {"preset": preset_name(name), "kind": kind, "width": width, "samples": n_samples,
            "rel_error": err, "tol": tol, "passed": err <= tol, "seconds": time.perf_counter() - t0}
