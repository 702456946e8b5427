import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("MULTIDEV_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "multidev.numerics._fftcore",
                    ["src/multidev/numerics/_fftcore.pyx"],
                    extra_compile_args=["-O3", "-fcx-limited-range"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
