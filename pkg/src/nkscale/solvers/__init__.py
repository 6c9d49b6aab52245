"""Exact kernel regression solvers."""

from nkscale.solvers.cg import CgReport, cg_solve, masked_operator, regularized
from nkscale.solvers.cholesky import (
    Preconditioner,
    identity_preconditioner,
    pivoted_cholesky,
    pivoted_cholesky_dense,
    precond_apply,
)
from nkscale.solvers.predict import decode_classes, kernel_predict, solve_labels

__all__ = [
    "CgReport",
    "Preconditioner",
    "cg_solve",
    "decode_classes",
    "identity_preconditioner",
    "kernel_predict",
    "masked_operator",
    "pivoted_cholesky",
    "pivoted_cholesky_dense",
    "precond_apply",
    "regularized",
    "solve_labels",
]
