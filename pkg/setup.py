"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile is downgraded to a warning.
"""

import warnings

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/ecofollow/_core.pyx"],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    include_dirs = [numpy.get_include()]
    for ext in ext_modules:
        ext.include_dirs = include_dirs
except Exception as exc:  # pragma: no cover - build-env dependent
    warnings.warn(f"Cython core not built, using pure-python kernels: {exc}")

setup(ext_modules=ext_modules)
