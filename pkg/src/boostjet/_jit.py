"""Numba availability and the pure-numpy switch.

Set ``BOOSTJET_DISABLE_JIT=1`` before import to force the numpy fallback
kernels even when numba is installed.
"""
import os
import warnings

_DISABLED = os.environ.get("BOOSTJET_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes")

try:
    import numba as _numba
    NUMBA_AVAILABLE = True
    # an old system TBB only disables one threading layer; numba falls back on its own
    warnings.filterwarnings("ignore", message="The TBB threading layer requires")
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    Kernels are always compiled when numba exists (so benchmarks and
    equivalence tests can reach them); ``USE_NUMBA`` only decides which
    path the public functions dispatch to.
    """
    if _numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return _numba.njit(*args, **kwargs)


if _numba is not None:
    prange = _numba.prange
else:  # pragma: no cover
    prange = range


def set_num_threads(n):
    if _numba is not None and n >= 1:
        _numba.set_num_threads(min(int(n), _numba.config.NUMBA_NUM_THREADS))


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
