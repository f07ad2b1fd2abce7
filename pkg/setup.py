import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# Bit-identical trajectories vs the pure-Python backend require two things:
# no FMA contraction of a*b+c, and no fusing of adjacent sin/cos calls into
# glibc sincos (which differs from separate calls in the last ulp).
ext = Extension(
    "planartrack.kernel._core",
    ["src/planartrack/kernel/_core.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-builtin-sincos",
                        "-fno-builtin-sin", "-fno-builtin-cos"],
)

setup(ext_modules=cythonize([ext], language_level=3))
