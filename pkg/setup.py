import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# The compiled kernels are an optional speedup: if the build fails the
# package falls back to the numpy implementations in simprop.kernels.pyref.
extensions = [
    Extension(
        "simprop.kernels._convkern",
        ["src/simprop/kernels/_convkern.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-march=native"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
