"""Build script for the optional compiled sampling kernels.

The package works without the extension (a pure-numpy fallback is selected
at import time); building it makes warping/exponentiation several times
faster, which matters for CPU training.
"""

import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "seqmotion.kernels._core",
        ["src/seqmotion/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
