"""Optional numba acceleration.

Kernels are written once in a numba-compatible subset of Python. When
``MQME_DISABLE_JIT`` is set to a truthy value (or numba is missing) the
decorator is the identity and the same functions run as plain Python.
"""
import os

_FLAG = os.environ.get("MQME_DISABLE_JIT", "").strip().lower()
DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

JIT_ENABLED = HAVE_NUMBA and not DISABLED


def njit(*args, **kwargs):
    if JIT_ENABLED:
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap
