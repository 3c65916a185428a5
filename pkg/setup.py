"""Builds the optional compiled rasterizer; the package works without it."""

import os

import numpy as np
from setuptools import setup

ext_modules = []
if not os.environ.get("BLURSPLAT_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "blursplat.splat._raster",
                    ["src/blursplat/splat/_raster.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-fopenmp"],
                    extra_link_args=["-fopenmp"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
