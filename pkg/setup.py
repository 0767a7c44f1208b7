"""Build hook for the optional compiled kernels.

The package works without them; ``sdc_concepts.kernels`` falls back to the
pure-Python implementations when the extension is missing.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "sdc_concepts._kernels",
                ["src/sdc_concepts/_kernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
