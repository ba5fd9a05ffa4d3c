"""Worker-process bootstrap.

Imported in freshly spawned workers before any numerical module loads, so
the BLAS thread caps below actually take effect; chains already saturate the
worker pool, and nested BLAS threading only adds contention.
"""
import os


def limit_blas_threads():
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ.setdefault(var, "1")
