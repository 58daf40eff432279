"""Backend switch for the compiled kernels.

Hot loops are written once in numba-compatible style. When numba is
importable and ``VRSPH_BACKEND`` is unset or ``numba``, they are compiled
with ``numba.njit``; setting ``VRSPH_BACKEND=numpy`` (or the legacy
``VRSPH_DISABLE_NUMBA=1``) routes every caller to the pure-numpy path.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None


def _requested_backend():
    if os.environ.get("VRSPH_DISABLE_NUMBA", "").lower() in ("1", "true", "yes"):
        return "numpy"
    name = os.environ.get("VRSPH_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"VRSPH_BACKEND must be 'numba' or 'numpy', got {name!r}")
    return name


BACKEND = "numba" if (numba is not None and _requested_backend() == "numba") else "numpy"
USE_NUMBA = BACKEND == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` when the numba backend is active, identity otherwise."""
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        func = args[0]
        if USE_NUMBA:
            return numba.njit(cache=True)(func)
        func.py_func = func
        return func

    def wrap(func):
        if USE_NUMBA:
            kwargs.setdefault("cache", True)
            return numba.njit(*args, **kwargs)(func)
        func.py_func = func
        return func

    return wrap


def pick(numba_impl, numpy_impl):
    """Return the implementation matching the active backend."""
    return numba_impl if USE_NUMBA else numpy_impl
