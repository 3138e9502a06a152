"""
Backend selection for the fused recurrent kernels.

The compiled extension is preferred; the numpy module is used when it is not
importable or when ``CGLMHA_PURE_PYTHON`` is set in the environment. Both
expose ``gru_forward``, ``gru_backward``, ``lstm_forward`` and
``lstm_backward`` with identical signatures.
"""
import importlib
import os

from . import _recurrent_py

_FORCE_PY = os.environ.get("CGLMHA_PURE_PYTHON", "").strip() not in ("", "0")


def _load():
    if _FORCE_PY:
        return _recurrent_py, "python"
    try:
        return importlib.import_module("cglmha._recurrent"), "compiled"
    except ImportError:
        return _recurrent_py, "python"


backend, BACKEND = _load()


def get_backend(name=None):
    """Return the kernel module for ``name`` ("compiled" or "python"); default is the active one."""
    if name is None:
        return backend
    if name == "python":
        return _recurrent_py
    if name == "compiled":
        return importlib.import_module("cglmha._recurrent")
    raise ValueError(f"unknown backend {name!r}")


def compiled_available():
    try:
        importlib.import_module("cglmha._recurrent")
    except ImportError:
        return False
    return True
