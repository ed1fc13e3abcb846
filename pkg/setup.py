"""Builds the optional compiled rasterizer kernel.

The package works without it (a numpy fallback is selected at import time),
so a failed extension build is not fatal to `pip install`.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "incsplat.renderer._kernels_c",
                ["src/incsplat/renderer/_kernels_c.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
