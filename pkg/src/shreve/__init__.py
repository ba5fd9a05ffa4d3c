"""Hierarchical spatial random-effects modeling for longitudinal grid data.

Fits the SHREVE family of Bayesian models (spatially varying hierarchical
random effects, optionally with visit effects) to longitudinal measurements
on a regular grid, with full MCMC inference, convergence diagnostics, model
comparison, and a generative simulator.

Submodules are imported lazily so that worker processes can configure their
environment (BLAS thread counts) before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "grid",
    "kernels",
    "data",
    "dataprep",
    "model",
    "core",
    "sampler",
    "draws",
    "diagnostics",
    "evaluate",
    "simulate",
    "config",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
