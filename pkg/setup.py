"""Build the optional compiled recurrent kernels.

The package works without them: ``cglmha.kernels`` falls back to the numpy
implementation when the extension is absent. Set ``CGLMHA_NO_EXT=1`` to skip
compilation entirely, ``CGLMHA_PORTABLE=1`` to build without CPU-specific
flags.
"""
import os
import platform

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing or failing
            print(f"warning: compiled kernels not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); using numpy fallback")


def _cpu_flags():
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("flags"):
                    return set(line.split(":", 1)[1].split())
    except OSError:
        pass
    return set()


def _compile_options():
    """Vectorized libm (glibc libmvec) needs fast-math at compile time only.

    ``-ffast-math`` is kept out of the link step so the shared object does not
    pull in crtfastmath and switch the whole process to flush-to-zero.
    """
    args, libs = ["-O3"], []
    if platform.system() == "Linux" and platform.machine() == "x86_64" and not os.environ.get("CGLMHA_PORTABLE"):
        args.append("-ffast-math")
        libs.append("mvec")
        if {"avx2", "fma"} <= _cpu_flags():
            args += ["-mavx2", "-mfma"]
    return args, libs


def extensions():
    if os.environ.get("CGLMHA_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    args, libs = _compile_options()
    ext = Extension(
        "cglmha._recurrent",
        ["src/cglmha/_recurrent.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=args,
        libraries=libs,
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
