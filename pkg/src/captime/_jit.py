"""Optional numba acceleration.

Set ``CAPTIME_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba
cannot be imported the numpy kernels are used automatically.
"""
import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _have_numba():
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


HAVE_NUMBA = _have_numba()
NUMBA_ENABLED = HAVE_NUMBA and os.environ.get("CAPTIME_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")

# nogil only: fastmath would reorder reductions and break bitwise determinism
JIT_OPTIONS = {"nogil": True, "cache": True}

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit
