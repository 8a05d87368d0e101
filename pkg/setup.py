"""Build script: compiles the optional Cython core.

The extension holds the hot kernels (batched MLP forward/backward and the
path-integration inner loop).  If Cython or a C compiler is unavailable the
package still installs and falls back to the pure-numpy implementation at
import time (see epkit.backend).

    pip install -e . --no-build-isolation
"""

import os

from setuptools import Extension, setup

try:
    if not os.path.exists("src/epkit/_core.pyx"):
        raise ImportError("extension source not present")
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "epkit._core",
                ["src/epkit/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
