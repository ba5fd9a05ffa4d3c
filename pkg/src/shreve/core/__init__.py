"""Sweep engine backend selection.

The compiled Cython engine is preferred; the pure-Python reference engine is
the fallback when the extension is unavailable (or when the environment
variable ``SHREVE_PURE_PYTHON=1`` forces it, e.g. for benchmarking). Both
produce bit-identical chains.
"""
import os

if os.environ.get("SHREVE_PURE_PYTHON") == "1":
    from . import _ref as _impl

    BACKEND = "python"
else:
    try:
        from . import _fast as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _ref as _impl

        BACKEND = "python"

sweep_blocks = _impl.sweep_blocks


def backend_name():
    """Name of the active engine: ``"cython"`` or ``"python"``."""
    return BACKEND
