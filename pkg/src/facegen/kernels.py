"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the numpy
versions in ``_pykernels`` are used.  Set ``FACEGEN_KERNELS=python`` to force
the fallback.
"""

import os

import numpy as np

from . import _pykernels

_impl = _pykernels
BACKEND = "python"
if os.environ.get("FACEGEN_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

out_size = _pykernels.out_size


def im2col(x, k, stride, pad, impl=None):
    impl = impl or _impl
    return impl.im2col(np.ascontiguousarray(x, dtype=np.float64), k, stride, pad)


def col2im(cols, x_shape, k, stride, pad, impl=None):
    impl = impl or _impl
    return impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), tuple(x_shape), k, stride, pad)


def maxpool_forward(x, k, stride, impl=None):
    impl = impl or _impl
    return impl.maxpool_forward(np.ascontiguousarray(x, dtype=np.float64), k, stride)


def maxpool_backward(dout, idx, x_shape, impl=None):
    impl = impl or _impl
    return impl.maxpool_backward(
        np.ascontiguousarray(dout, dtype=np.float64),
        np.ascontiguousarray(idx, dtype=np.int64),
        tuple(x_shape),
    )


def backends():
    """Available kernel implementations, keyed by name."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
