"""Kernel backend selection.

The scan statistics run on a numba-compiled kernel when numba is importable,
falling back to a pure-numpy twin otherwise. Two environment variables
control this:

COVSCAN_BACKEND
    "numba" or "numpy". Forces the backend; "numba" raises if numba is
    missing instead of silently falling back. Unset picks numba when
    available.
COVSCAN_WORKERS
    Positive integer. Caps the numba thread count (never raising it above
    what the numba runtime was launched with). Ignored by the numpy backend,
    which is single-threaded.
"""

from __future__ import annotations

import os

_VALID = ("numba", "numpy")


def backend_name() -> str:
    """The backend that get_kernels() would return, without importing numba."""
    choice = os.environ.get("COVSCAN_BACKEND", "").strip().lower()
    if choice and choice not in _VALID:
        raise ValueError(f"COVSCAN_BACKEND must be one of {_VALID}, got {choice!r}")
    if choice:
        return choice
    try:
        import numba  # noqa: F401
    except ImportError:
        return "numpy"
    return "numba"


def _configure_workers() -> None:
    raw = os.environ.get("COVSCAN_WORKERS", "").strip()
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"COVSCAN_WORKERS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ValueError(f"COVSCAN_WORKERS must be a positive integer, got {raw!r}")
    import numba

    # set_num_threads cannot exceed the launch-time thread count
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def get_kernels():
    """Import and return the active kernel module."""
    name = backend_name()
    if name == "numpy":
        from . import _kernels_numpy

        return _kernels_numpy
    try:
        from . import _kernels_numba
    except ImportError:
        if os.environ.get("COVSCAN_BACKEND", "").strip().lower() == "numba":
            raise
        from . import _kernels_numpy

        return _kernels_numpy
    _configure_workers()
    return _kernels_numba
