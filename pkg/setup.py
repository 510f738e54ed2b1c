"""Build script: compiles the optional fast kernel extension.

The package is fully functional without the extension; the numpy reference
kernels are selected at import time whenever `invgfx.kernels._fastcore` is
missing. Build failures therefore degrade to a warning instead of aborting
the install.
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Best-effort build_ext: a broken toolchain must not block installs."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - toolchain dependent
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - toolchain dependent
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        sys.stderr.write(
            "warning: could not build invgfx.kernels._fastcore (%s); "
            "falling back to the pure numpy kernels\n" % (exc,)
        )


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:  # pragma: no cover - build env dependent
        sys.stderr.write("warning: %s; skipping fast kernel build\n" % (exc,))
        return []
    return cythonize(
        [
            Extension(
                "invgfx.kernels._fastcore",
                ["src/invgfx/kernels/_fastcore.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
