"""Numba switch.

Set ``OD_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba is not
importable the numpy path is used automatically.
"""

import os
import warnings

_disabled = os.environ.get("OD_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _disabled:
        raise ImportError("disabled by OD_DISABLE_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError as exc:  # pragma: no cover - exercised via env flag in a subprocess
    NUMBA_ENABLED = False
    if not _disabled:
        warnings.warn(f"numba unavailable ({exc}); falling back to numpy kernels")

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def identity(fn):
            return fn

        return identity


def set_threads(n: int) -> None:
    """Cap BLAS and numba worker threads."""
    n = max(1, int(n))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass
    if NUMBA_ENABLED:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
