"""Build script: compiles the optional fast-kernel extension.

The extension is a pure speedup; if no compiler (or Cython + pregenerated C)
is available the package installs anyway and falls back to the numpy kernels
at import time.
"""
import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible, otherwise install pure-Python."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: fast kernels not built ({exc}); "
                  "using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to compile {ext.name} ({exc}); "
                  "using numpy fallback")


def extension_sources():
    pyx = os.path.join("src", "vorisk", "_kernels", "_fastkern.pyx")
    c = os.path.join("src", "vorisk", "_kernels", "_fastkern.c")
    try:
        from Cython.Build import cythonize
    except ImportError:
        return [c] if os.path.exists(c) else None, False
    return [pyx], True


def make_extensions():
    sources, use_cython = extension_sources()
    if sources is None:
        return []
    ext = Extension(
        "vorisk._kernels._fastkern",
        sources,
        extra_compile_args=["-O3"],
    )
    if use_cython:
        from Cython.Build import cythonize
        return cythonize([ext], compiler_directives={"language_level": "3"})
    return [ext]


setup(
    ext_modules=make_extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
