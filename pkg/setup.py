"""Build the optional compiled tree kernel.

The package works without it (pure-Python fallback), so a failed or skipped
build is not fatal.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("TABGRAA_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "tabgraa._treekern",
                    ["src/tabgraa/_treekern.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
