"""Worker-thread bounds.

CELLSEARCH_THREADS caps every parallel backend this package touches (BLAS,
numba, trial-scoring pools). 1 forces fully serial, bitwise-reference mode.
This module must be imported before numpy so the BLAS environment variables
take effect; cellsearch/__init__ does that.
"""

import os

_BLAS_VARS = ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
              "NUMEXPR_NUM_THREADS")


def requested_threads() -> int:
    raw = os.environ.get("CELLSEARCH_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        n = os.cpu_count() or 1
    return n


def _apply_env() -> int:
    n = requested_threads()
    for var in _BLAS_VARS:
        # respect an explicit user override of the BLAS-level variable
        os.environ.setdefault(var, str(n))
    return n


NUM_THREADS = _apply_env()
