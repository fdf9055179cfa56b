"""numba switch.

``ADAPRUNE_DISABLE_JIT=1`` (or a missing numba install) routes every kernel in
:mod:`adaprune.kernels` to its pure-numpy implementation.
"""
import os

_DISABLED = os.environ.get("ADAPRUNE_DISABLE_JIT", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper


DEFAULT_BACKEND = "numba" if HAVE_NUMBA else "numpy"
