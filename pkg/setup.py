import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("GVDIFF_NO_EXT", "0") in ("", "0"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "gvdiff._kernels",
                    ["src/gvdiff/_kernels.pyx"],
                    include_dirs=[np.get_include(), "src/gvdiff"],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
