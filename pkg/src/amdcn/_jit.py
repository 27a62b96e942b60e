"""numba shim.

Set ``AMDCN_DISABLE_NUMBA=1`` (or ``AMDCN_BACKEND=numpy``) to run the pure-numpy
kernels instead of the compiled loops.
"""

import os

_env_backend = os.environ.get("AMDCN_BACKEND", "").strip().lower()
_disabled = os.environ.get("AMDCN_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    import numba
    from numba import njit, prange, get_num_threads, set_num_threads

    HAS_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skip the TBB probe; the bundled TBB is often too old and only warns
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAS_NUMBA = False

    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper

    prange = range

    def get_num_threads():
        return 1

    def set_num_threads(n):
        pass


if _env_backend in ("numba", "numpy"):
    DEFAULT_BACKEND = _env_backend
else:
    DEFAULT_BACKEND = "numpy" if _disabled else "numba"

if DEFAULT_BACKEND == "numba" and not HAS_NUMBA:  # pragma: no cover
    DEFAULT_BACKEND = "numpy"


def jit_opts(parallel=True):
    return dict(parallel=parallel, fastmath=False, cache=True, nogil=True, error_model="numpy")
