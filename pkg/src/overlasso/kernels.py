"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise (or when the
``OVERLASSO_PURE`` environment variable is set to a non-empty value other
than ``0``) the numpy fallback is used. ``BACKEND`` names the active one.
"""
import os

from . import _kernels_py

_force_pure = os.environ.get("OVERLASSO_PURE", "") not in ("", "0")

if _force_pure:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

bcd_solve = _impl.bcd_solve
norm_admm = _impl.norm_admm


def get_backend(name):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
