"""JIT dispatch for the hot kernels.

Numeric inner loops (ray-march rendering, capsule field evaluation,
skinning weights) each exist in two flavors: a numba ``@njit`` loop and a
vectorized pure-numpy fallback. The numba path is the default; set

    CANONAVATAR_DISABLE_NUMBA=1

to force the numpy path (useful for debugging and for
``benchmarks/bench_kernels.py``, which times both). The flag is read once
at import time. If numba is not importable the fallback is selected
automatically.
"""

import os

NUMBA_ENABLED = os.environ.get("CANONAVATAR_DISABLE_NUMBA", "0").lower() not in (
    "1", "true", "yes",
)

if NUMBA_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:

    def njit(*args, **kwargs):
        """No-op stand-in so ``@njit``-decorated code stays importable."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap
