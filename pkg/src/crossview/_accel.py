"""Numba switch.

Set ``CROSSVIEW_NUMBA=0`` to force the pure-numpy fallbacks. The flag is read
once at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("CROSSVIEW_NUMBA", "1") not in ("0", "false", "no")


def njit(f):
    """Compile ``f`` with numba when enabled; otherwise return it untouched."""
    if numba is None:
        return f
    return numba.njit(cache=True)(f)


def pick(jitted, fallback):
    return jitted if USE_NUMBA else fallback
