import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FEDMIM_NO_EXT", "") in ("", "0"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "fedmim._kernels",
                    ["src/fedmim/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: keeps float32 results identical to numpy twins
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
