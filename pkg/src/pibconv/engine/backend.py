"""Kernel backend selection.

Two interchangeable kernel modules implement the conv/pool primitives:

* ``kernels_numba`` -- numba ``@njit`` loop kernels for the shapes where
  loops beat vectorized numpy (depthwise convolutions, pooling); dense
  convolutions delegate to the shared im2col/BLAS routine because BLAS
  is the fastest kernel available either way.
* ``kernels_numpy`` -- pure numpy throughout; no compilation step.

The active backend is chosen once at import time.  Set the environment
variable ``PIBCONV_BACKEND=numpy`` to force the fallback (useful when
numba is unavailable or compile time is unwanted), or ``=numba`` to
fail loudly if the JIT cannot be used.  ``benchmarks/bench_kernels.py``
compares the two.
"""

from __future__ import annotations

import contextlib
import os

_ENV_VAR = "PIBCONV_BACKEND"
_active = None
_name = None


def _load(name):
    if name == "numpy":
        from . import kernels_numpy

        return kernels_numpy
    if name == "numba":
        from . import kernels_numba

        return kernels_numba
    raise ValueError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")


def _init():
    global _active, _name
    requested = os.environ.get(_ENV_VAR, "").strip().lower()
    if requested:
        _active = _load(requested)
        _name = requested
        return
    try:
        _active = _load("numba")
        _name = "numba"
    except ImportError:
        _active = _load("numpy")
        _name = "numpy"


def kernels():
    """Return the active kernel module."""
    if _active is None:
        _init()
    return _active


def backend_name() -> str:
    if _active is None:
        _init()
    return _name


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch backends (tests and benchmarks)."""
    global _active, _name
    if _active is None:
        _init()
    prev = (_active, _name)
    _active = _load(name)
    _name = name
    try:
        yield _active
    finally:
        _active, _name = prev
