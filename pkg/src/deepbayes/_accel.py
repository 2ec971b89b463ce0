"""Numba switch.

Set ``DEEPBAYES_NUMBA=0`` to force the pure-numpy kernels even when numba is
installed. The flag is read once at import time.
"""
import os

_flag = os.environ.get("DEEPBAYES_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a soft dependency
    _numba = None

USE_NUMBA = _numba is not None and _flag not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` with numba when enabled, otherwise return it unchanged."""
    if USE_NUMBA:
        return _numba.njit(cache=True, nogil=True)(func)
    return func
