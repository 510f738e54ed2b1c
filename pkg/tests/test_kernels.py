"""Backend parity: the compiled kernels must match the numpy reference.

Forwards are bit-identical (same accumulation order); gradients agree to
floating-point rounding (the reference uses BLAS reductions).
"""

import numpy as np
import pytest

from invgfx import kernels
from invgfx.kernels import reference

fastcore = pytest.importorskip("invgfx.kernels._fastcore")


def c3(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_forward_bit_identical(rng, stride, pad):
    x = rng.normal(size=(3, 11, 9))
    k = rng.normal(size=(4, 3, 3, 3))
    a = reference.conv2d_forward(x, k, stride, pad)
    b = fastcore.conv2d_forward(c3(x), c3(k), stride, pad)
    assert np.array_equal(a, b)


def test_conv_grads_close(rng):
    x = rng.normal(size=(3, 10, 10))
    k = rng.normal(size=(4, 3, 3, 3))
    g = reference.conv2d_forward(x, k, 2, 1)
    gi_a = reference.conv2d_grad_input(g, k, 2, 1, x.shape)
    gi_b = fastcore.conv2d_grad_input(c3(g), c3(k), 2, 1, x.shape)
    assert np.max(np.abs(gi_a - gi_b)) < 1e-12
    gk_a = reference.conv2d_grad_kernel(g, x, 2, 1, k.shape)
    gk_b = fastcore.conv2d_grad_kernel(c3(g), c3(x), 2, 1, k.shape)
    assert np.max(np.abs(gk_a - gk_b)) < 1e-12


@pytest.mark.parametrize("window,stride", [(2, 2), (4, 4), (3, 2)])
def test_pool_bit_identical(rng, window, stride):
    x = rng.normal(size=(2, 12, 12))
    a = reference.avg_pool_forward(x, window, stride)
    b = fastcore.avg_pool_forward(c3(x), window, stride)
    assert np.array_equal(a, b)
    g = rng.normal(size=a.shape)
    ga = reference.avg_pool_grad(g, window, stride, x.shape)
    gb = fastcore.avg_pool_grad(c3(g), window, stride, x.shape)
    assert np.array_equal(ga, gb)


def test_bilinear_bit_identical(rng):
    img = rng.normal(size=(3, 9, 8))
    xs = rng.uniform(-2, 10, size=(6, 5))
    ys = rng.uniform(-2, 11, size=(6, 5))
    a = reference.bilinear_forward(img, xs, ys)
    b = fastcore.bilinear_forward(c3(img), c3(xs), c3(ys))
    assert np.array_equal(a, b)
    g = rng.normal(size=a.shape)
    outs_a = reference.bilinear_grad(img, xs, ys, g)
    outs_b = fastcore.bilinear_grad(c3(img), c3(xs), c3(ys), c3(g))
    for u, v in zip(outs_a, outs_b):
        assert np.max(np.abs(u - v)) < 1e-12


def test_dispatch_layer_reports_backend():
    assert kernels.backend_name() in ("compiled", "reference")
