"""Kernel backend selection.

Hot kernels are written once in a numba-compatible subset of numpy and are
compiled with ``numba.njit`` unless ``ZORO_DISABLE_NUMBA`` is set to a truthy
value, in which case the same source runs as plain numpy.  The flag is read
once at import time.
"""

import os

_FALSY = ("", "0", "false", "no", "off")


def _numba_requested():
    return os.environ.get("ZORO_DISABLE_NUMBA", "").strip().lower() in _FALSY


try:
    if not _numba_requested():
        raise ImportError("numba disabled by ZORO_DISABLE_NUMBA")
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def jit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if HAS_NUMBA:
        return _njit(cache=True)(func)
    return func
