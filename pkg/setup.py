from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/squareops/_kernels/_core.pyx"],
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False},
    )
except ImportError:
    # The package runs on the NumPy fallback kernels without the extension.
    ext_modules = []

setup(ext_modules=ext_modules)
