# Builds the optional Cython kernel module. If Cython is unavailable the
# package still installs and runs on the numpy fallback.
#
#   pip install -e . --no-build-isolation
#   DATADROP_NO_EXT=1 pip install -e . --no-build-isolation   (pure Python)
import os

from setuptools import Extension, setup


def ext_modules():
    if os.environ.get("DATADROP_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    extensions = [
        Extension(
            "datadrop._kernels",
            ["src/datadrop/_kernels.pyx"],
            # no -ffast-math: results must be reproducible bit-for-bit
            extra_compile_args=["-O3"],
        )
    ]
    return cythonize(extensions, compiler_directives={"language_level": "3"})


setup(ext_modules=ext_modules())
