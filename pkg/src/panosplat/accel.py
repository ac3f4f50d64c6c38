"""Kernel backend selection: numba-jitted loops or pure-numpy fallbacks.

The hot kernels (cube-map compositing, sparse convolution, farthest-point
sampling, nearest-neighbor queries) exist in two interchangeable
implementations.  The default backend is numba when importable; setting the
environment variable ``PANOSPLAT_NUMBA=0`` before import selects the pure
numpy path instead.  Tests and benchmarks can switch per call site with
:func:`forced`.
"""

import os
from contextlib import contextmanager

ENV_VAR = "PANOSPLAT_NUMBA"


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _detect_default() -> str:
    flag = os.environ.get(ENV_VAR, "").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return "numpy"
    if not numba_available():
        if flag in ("1", "true", "on", "yes"):
            raise ImportError(
                f"{ENV_VAR}={flag!r} requests the numba backend but numba is not installed"
            )
        return "numpy"
    return "numba"


_mode = _detect_default()


def mode() -> str:
    """Active kernel backend, either ``"numba"`` or ``"numpy"``."""
    return _mode


@contextmanager
def forced(backend: str):
    """Temporarily force a kernel backend (used by tests and benchmarks)."""
    global _mode
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not numba_available():
        raise ImportError("numba backend requested but numba is not installed")
    previous = _mode
    _mode = backend
    try:
        yield
    finally:
        _mode = previous
