"""Kernel backend selection.

The compiled extension is preferred when importable; setting the environment
variable ``INVGFX_PURE_PYTHON=1`` (or a failed build) selects the numpy
reference backend instead. Both backends share accumulation order, so the
choice never changes numerical results of a given run.
"""

import os

import numpy as np

from . import reference

_impl = reference
_backend = "reference"

if not os.environ.get("INVGFX_PURE_PYTHON"):
    try:
        from . import _fastcore as _impl  # type: ignore[no-redef]

        _backend = "compiled"
    except ImportError:
        pass


def backend_name() -> str:
    return _backend


def _c3(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, k, stride, pad):
    return _impl.conv2d_forward(_c3(x), _c3(k), int(stride), int(pad))


def conv2d_grad_input(g, k, stride, pad, x_shape):
    return _impl.conv2d_grad_input(_c3(g), _c3(k), int(stride), int(pad), tuple(x_shape))


def conv2d_grad_kernel(g, x, stride, pad, k_shape):
    # The BLAS tensordot formulation beats the scalar loop at every shape we
    # use, so this one always routes to the reference backend.
    return reference.conv2d_grad_kernel(_c3(g), _c3(x), int(stride), int(pad),
                                        tuple(k_shape))


def avg_pool_forward(x, window, stride):
    return _impl.avg_pool_forward(_c3(x), int(window), int(stride))


def avg_pool_grad(g, window, stride, x_shape):
    return _impl.avg_pool_grad(_c3(g), int(window), int(stride), tuple(x_shape))


def bilinear_forward(img, xs, ys):
    return _impl.bilinear_forward(_c3(img), _c3(xs), _c3(ys))


def bilinear_grad(img, xs, ys, g):
    return _impl.bilinear_grad(_c3(img), _c3(xs), _c3(ys), _c3(g))
