"""Build script for the compiled ray-marching kernels.

The extension is optional: if Cython or a C compiler is unavailable the
package installs anyway and falls back to the NumPy kernels at import time
(see voxrf._kernels). Build in place for development with

    python setup.py build_ext --inplace
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "voxrf._kernels._core",
                ["src/voxrf/_kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
