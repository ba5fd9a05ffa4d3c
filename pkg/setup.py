"""Build script: compiles the optional Cython sweep core.

The package works without the compiled extension (a pure-Python engine is
selected at import time), so a failed extension build only costs speed.
"""
import os

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible, fall back to pure Python otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: compiled core skipped ({exc}); using pure-Python engine")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: building {ext.name} failed ({exc}); using pure-Python engine")


extensions = []
if os.environ.get("SHREVE_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "shreve.core._fast",
                    ["src/shreve/core/_fast.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        print("warning: Cython not available; using pure-Python engine")

setup(ext_modules=extensions, cmdclass={"build_ext": OptionalBuildExt})
