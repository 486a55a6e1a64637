"""Backend switch for the compiled kernels.

Set ``MIXEDIMPUTE_DISABLE_NUMBA=1`` to force the pure-numpy path. If numba is
not importable the numpy path is used regardless.
"""
import os
import warnings

_disabled = os.environ.get("MIXEDIMPUTE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _disabled:
        raise ImportError("disabled by MIXEDIMPUTE_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError as exc:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False
    if not _disabled:
        warnings.warn(f"numba unavailable ({exc}); using numpy kernels")

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


BACKEND = "numba" if HAVE_NUMBA else "numpy"
