"""Numba toggle.

Set ``EMDSPLAT_DISABLE_NUMBA=1`` before import to route the hot kernels
through their pure-numpy implementations instead of the jitted ones.
"""
import os

_TRUTHY = {"1", "true", "yes", "on"}

NUMBA_DISABLED = os.environ.get("EMDSPLAT_DISABLE_NUMBA", "").strip().lower() in _TRUTHY

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def default_backend():
    if NUMBA_DISABLED or not HAS_NUMBA:
        return "numpy"
    return "numba"


def set_num_threads(n):
    if HAS_NUMBA:
        # the kernels are serial; the portable layer avoids probing a system TBB
        if numba.config.THREADING_LAYER == "default":
            numba.config.THREADING_LAYER = "workqueue"
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
