import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

# The compiled rasterizer core is optional at runtime (a numpy fallback is
# selected at import when the extension is missing), but we always try to
# build it here.
extensions = [
    Extension(
        "betasplat._raster",
        ["src/betasplat/_raster.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off", "-fopenmp"],
        extra_link_args=["-fopenmp"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
