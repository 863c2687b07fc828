"""Numba switch for the hot kernels.

Set ``BCMP_AMOD_DISABLE_NUMBA=1`` to run every kernel through its pure
numpy/python path (useful for debugging and for platforms without numba).
"""

import os

_FLAG = os.environ.get("BCMP_AMOD_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")

NUMBA_OPTS = {"cache": True}


def njit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if numba is None:
        return func
    return numba.njit(func, **NUMBA_OPTS)
