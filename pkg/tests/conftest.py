"""Test process setup: cap BLAS threads before numpy loads.

Every matrix in the test workloads is small; threaded BLAS only adds
contention (and the sampler's worker processes cap threads the same way).
"""
import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, "1")
