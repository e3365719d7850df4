"""Builds the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so the build is marked optional: a missing compiler degrades
to the pure-Python path instead of failing the install.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    extensions = [
        Extension(
            "crn.kernels._core",
            ["src/crn/kernels/_core.pyx"],
            extra_compile_args=["-O3"],
            optional=True,
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": 3,
        },
    )

setup(ext_modules=ext_modules)
