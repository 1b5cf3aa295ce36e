import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("MSGTL_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "msgtl._kernels",
                    ["src/msgtl/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: keeps results identical to the numpy fallback
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
