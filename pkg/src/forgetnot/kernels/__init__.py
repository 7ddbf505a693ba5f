"""Hot numeric kernels with a numba fast path and a numpy fallback.

The backend is chosen once at import time: numba is used when it imports
cleanly and the environment variable ``FORGETNOT_NUMBA`` is not set to
``0``/``off``/``false``. Both backends share one calling convention, so
the rest of the package never branches on the flag.
"""

import os

from . import _numpy

_flag = os.environ.get("FORGETNOT_NUMBA", "auto").strip().lower()
_want_numba = _flag not in ("0", "off", "false", "no")

if _want_numba:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:
        _impl = _numpy
        BACKEND = "numpy"
else:
    _impl = _numpy
    BACKEND = "numpy"


def conv2d_forward(x, w, bias, pad):
    return _impl.conv2d_forward(x, w, bias, pad)


def conv2d_backward_input(dy, w, x_shape, pad):
    return _impl.conv2d_backward_input(dy, w, tuple(x_shape), pad)


def conv2d_backward_weights(dy, x, w_shape, pad):
    return _impl.conv2d_backward_weights(dy, x, tuple(w_shape), pad)


def knn_kth_distance(query, ref, k, exclude_self=False):
    return _impl.knn_kth_distance(query, ref, k, exclude_self)


def available_backends():
    """Names of importable backends, for the benchmark script."""
    names = ["numpy"]
    try:
        from . import _numba  # noqa: F401
        names.append("numba")
    except ImportError:
        pass
    return names
