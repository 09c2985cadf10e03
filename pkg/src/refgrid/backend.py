"""Kernel backend selection.

``RGIN_BACKEND`` controls which convolution kernels the tensor ops call:

* ``auto`` (default): use the numba kernels if numba imports, else numpy.
* ``numba``: require the numba kernels; raise if numba is unavailable.
* ``numpy``: always use the pure-numpy fallback.

The environment variable sets the default at import time; :func:`use` swaps
the active backend afterwards (as a call or a context manager) so a benchmark
can time both implementations in one process.
"""

import contextlib
import os

from . import kernels as _np_kernels

_BACKENDS = {"numpy": _np_kernels}
_name = "numpy"

_REQUESTED = os.environ.get("RGIN_BACKEND", "auto").strip().lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"RGIN_BACKEND must be one of auto|numba|numpy, got {_REQUESTED!r}"
    )

if _REQUESTED in ("auto", "numba"):
    try:
        from . import kernels_numba as _nb_kernels
        _BACKENDS["numba"] = _nb_kernels
        _name = "numba"
    except ImportError:
        if _REQUESTED == "numba":
            raise ImportError(
                "RGIN_BACKEND=numba but numba could not be imported"
            )


def available_backends():
    """Names of the backends importable in this process."""
    names = ["numpy"]
    if "numba" not in _BACKENDS:
        try:
            from . import kernels_numba as _nb_kernels
            _BACKENDS["numba"] = _nb_kernels
        except ImportError:
            return tuple(names)
    names.append("numba")
    return tuple(names)


def active_backend():
    """Name of the kernel backend in use, ``"numba"`` or ``"numpy"``."""
    return _name


@contextlib.contextmanager
def use(name):
    """Switch the active backend, restoring the previous one on exit."""
    global _name
    name = name.strip().lower()
    if name not in available_backends():
        raise ValueError(f"backend {name!r} is not available")
    previous = _name
    _name = name
    try:
        yield
    finally:
        _name = previous


def conv2d_forward(xp, w, stride):
    return _BACKENDS[_name].conv2d_forward(xp, w, stride)


def conv2d_backward_input(g, w, stride, hp, wp):
    return _BACKENDS[_name].conv2d_backward_input(g, w, stride, hp, wp)


def conv2d_backward_kernel(xp, g, stride, kh, kw):
    return _BACKENDS[_name].conv2d_backward_kernel(xp, g, stride, kh, kw)
