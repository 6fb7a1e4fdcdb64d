import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; mitml.kernels falls back to NumPy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "mitml._kernels",
                ["src/mitml/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
