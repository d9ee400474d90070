"""JIT switch for the numeric hot kernels.

Kernels are written as plain numpy code that numba can compile in nopython
mode.  Setting the environment variable ``MGEMS_DISABLE_NUMBA=1`` (before
import) skips compilation and runs the same source through the interpreter,
which is handy for debugging and is the pure-numpy fallback path exercised
by ``benchmarks/benchmark_kernels.py`` and the kernel parity tests.
"""

import os

NUMBA_ENABLED = os.environ.get("MGEMS_DISABLE_NUMBA", "0") not in ("1", "true", "yes")

if NUMBA_ENABLED:
    from numba import njit
else:
    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper
