"""Builds the optional Cython kernel extension.

The package is fully functional without it; mmcare.kernels falls back to
the numpy reference implementation when the extension is absent.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/mmcare/kernels/_fast.pyx",
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    include_dirs = [np.get_include()]
except ImportError:
    include_dirs = []

if ext_modules:
    for ext in ext_modules:
        ext.include_dirs.extend(include_dirs)

setup(ext_modules=ext_modules)
