import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: without Cython (or a compiler) the
# package still works through the pure-Python fallback.
ext_modules = []
if not os.environ.get("MSURV_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext = Extension(
            "msurv._ckernels",
            ["src/msurv/_ckernels.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
        )
        ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
