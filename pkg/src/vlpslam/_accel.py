"""Numba switch for the hot kernels.

Set ``VLPSLAM_NUMBA=0`` to force the pure-numpy code paths. The flag is read
once at import; tests and the benchmark flip it at runtime with
:func:`use_numba`.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_ENABLED = numba is not None and os.environ.get("VLPSLAM_NUMBA", "1").strip().lower() not in (
    "0", "false", "no", "off")


def njit(func):
    """Compile ``func`` with numba in nopython mode when available."""
    if numba is None:
        return func
    return numba.njit(cache=True)(func)


def numba_enabled():
    return _ENABLED


def use_numba(flag):
    """Select the kernel backend; returns the previous setting."""
    global _ENABLED
    prev = _ENABLED
    _ENABLED = bool(flag) and numba is not None
    return prev
