import numpy as np
from setuptools import Extension, setup


def build_ext_modules():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "lrnas._kernels._fast",
        ["src/lrnas/_kernels/_fast.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=build_ext_modules())
