"""Backend selection for the numeric kernels.

The numba path is used when numba imports cleanly and ``TINYPRUNE_NUMBA`` is
not set to ``0``.  Every kernel in :mod:`tinyprune.kernels` has a pure-numpy
twin so results can be cross-checked and the package runs without numba.
"""

import os
from contextlib import contextmanager

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _flag_from_env():
    flag = os.environ.get("TINYPRUNE_NUMBA", "1").strip().lower()
    return HAVE_NUMBA and flag not in ("0", "false", "no", "off")


_state = {"numba": _flag_from_env()}


def use_numba():
    return _state["numba"]


def backend_name():
    return "numba" if _state["numba"] else "numpy"


def set_backend(name):
    """Switch kernels between ``"numba"`` and ``"numpy"`` for this process."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _state["numba"] = name == "numba"


@contextmanager
def backend(name):
    previous = backend_name()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
