"""Large-scale neural kernel regression: analytic NNGP/NTK kernels, a sharded
block store, a distributed matvec fabric, CG and approximate solvers, and a
dataset-scaling harness."""

__version__ = "0.1.0"
