"""Numba switch.

Set ``MSW_DISABLE_JIT=1`` to run every kernel through its pure-numpy twin.
The flag is read once at import time.
"""

import os

DISABLED = os.environ.get("MSW_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED

numba_default = {
    "nopython": True,
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
}


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it untouched."""
    if not HAVE_NUMBA:
        return fn
    return numba.jit(**numba_default)(fn)
