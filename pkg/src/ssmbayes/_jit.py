"""JIT compilation shim.

Kernels are compiled with numba when available. Setting the environment
variable ``SSMBAYES_DISABLE_JIT=1`` (or running without numba installed)
falls back to plain Python, which is slow but useful for debugging.
"""

import os

_DISABLED = os.environ.get("SSMBAYES_DISABLE_JIT", "0") == "1"

if not _DISABLED:
    try:
        from numba import njit as _numba_njit
    except ImportError:  # pragma: no cover - numba is a hard dependency
        _DISABLED = True

if _DISABLED:

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap

else:

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return _numba_njit(*args, **kwargs)
