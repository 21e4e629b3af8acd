"""Build script: compiles the kernel extension when Cython and a C compiler
are available, and degrades to a pure-python install otherwise (the package
selects the numpy fallback at import time)."""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("RADFIELD_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            ["src/radfield/_kernels.pyx"],
            compiler_directives={"language_level": "3"},
        )
        for ext in ext_modules:
            ext.include_dirs.append(numpy.get_include())
            ext.extra_compile_args = ["-O3"]
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
