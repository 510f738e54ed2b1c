"""Numpy reference kernels.

These implement the hot inner loops (convolution, pooling, bilinear warps)
with vectorized numpy. Accumulation over kernel taps runs in a fixed
(channel, row, column) order so the compiled backend and the brute-force
nested-loop oracles used in tests produce bit-identical sums.
"""

import numpy as np


def _pad2d(x, pad):
    if pad == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    out[:, pad : pad + h, pad : pad + w] = x
    return out


def conv2d_forward(x, k, stride, pad):
    """Cross-correlation of x (ci,h,w) with k (co,ci,kh,kw)."""
    co, ci, kh, kw = k.shape
    xp = _pad2d(x, pad)
    _, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((co, ho, wo), dtype=np.float64)
    hl = (ho - 1) * stride + 1
    wl = (wo - 1) * stride + 1
    for c in range(ci):
        for u in range(kh):
            for v in range(kw):
                patch = xp[c, u : u + hl : stride, v : v + wl : stride]
                out += patch[None, :, :] * k[:, c, u, v][:, None, None]
    return out


def conv2d_grad_input(g, k, stride, pad, x_shape):
    """Adjoint of conv2d_forward w.r.t. its input."""
    co, ci, kh, kw = k.shape
    c, h, w = x_shape
    _, ho, wo = g.shape
    gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    hl = (ho - 1) * stride + 1
    wl = (wo - 1) * stride + 1
    for cc in range(ci):
        for u in range(kh):
            for v in range(kw):
                gxp[cc, u : u + hl : stride, v : v + wl : stride] += np.tensordot(
                    k[:, cc, u, v], g, axes=(0, 0)
                )
    if pad == 0:
        return gxp
    return gxp[:, pad : pad + h, pad : pad + w]


def conv2d_grad_kernel(g, x, stride, pad, k_shape):
    """Adjoint of conv2d_forward w.r.t. its kernel."""
    co, ci, kh, kw = k_shape
    xp = _pad2d(x, pad)
    _, ho, wo = g.shape
    gk = np.zeros(k_shape, dtype=np.float64)
    hl = (ho - 1) * stride + 1
    wl = (wo - 1) * stride + 1
    for u in range(kh):
        for v in range(kw):
            patches = xp[:, u : u + hl : stride, v : v + wl : stride]
            gk[:, :, u, v] = np.tensordot(g, patches, axes=([1, 2], [1, 2]))
    return gk


def avg_pool_forward(x, window, stride):
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    acc = np.zeros((c, ho, wo), dtype=np.float64)
    hl = (ho - 1) * stride + 1
    wl = (wo - 1) * stride + 1
    for u in range(window):
        for v in range(window):
            acc += x[:, u : u + hl : stride, v : v + wl : stride]
    return acc / float(window * window)

def avg_pool_grad(g, window, stride, x_shape):
    c, h, w = x_shape
    _, ho, wo = g.shape
    gx = np.zeros(x_shape, dtype=np.float64)
    share = g / float(window * window)
    hl = (ho - 1) * stride + 1
    wl = (wo - 1) * stride + 1
    for u in range(window):
        for v in range(window):
            gx[:, u : u + hl : stride, v : v + wl : stride] += share
    return gx


def _bilinear_setup(img, xs, ys):
    c, h, w = img.shape
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x0 = np.minimum(x0, w - 1)
    y0 = np.minimum(y0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    return x0, x1, y0, y1, fx, fy


def bilinear_forward(img, xs, ys):
    """Sample img (c,h,w) at float coords; clamps to the border."""
    x0, x1, y0, y1, fx, fy = _bilinear_setup(img, xs, ys)
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x1]
    v10 = img[:, y1, x0]
    v11 = img[:, y1, x1]
    top = v00 + fx[None] * (v01 - v00)
    bot = v10 + fx[None] * (v11 - v10)
    return top + fy[None] * (bot - top)


def bilinear_grad(img, xs, ys, g):
    """Adjoints of bilinear_forward for the image and both coordinate grids.

    Coordinate gradients are zero wherever the lookup was clamped to the
    border, matching the derivative of the clamped sampling function.
    """
    c, h, w = img.shape
    x0, x1, y0, y1, fx, fy = _bilinear_setup(img, xs, ys)
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x1]
    v10 = img[:, y1, x0]
    v11 = img[:, y1, x1]

    inside_x = (xs > 0.0) & (xs < w - 1.0)
    inside_y = (ys > 0.0) & (ys < h - 1.0)
    dx = (1.0 - fy[None]) * (v01 - v00) + fy[None] * (v11 - v10)
    dy = (1.0 - fx[None]) * (v10 - v00) + fx[None] * (v11 - v01)
    gxs = np.sum(g * dx, axis=0) * inside_x
    gys = np.sum(g * dy, axis=0) * inside_y

    gimg = np.zeros_like(img)
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    cid = np.arange(c)[:, None, None]
    y0b = np.broadcast_to(y0, g.shape)
    x0b = np.broadcast_to(x0, g.shape)
    y1b = np.broadcast_to(y1, g.shape)
    x1b = np.broadcast_to(x1, g.shape)
    cb = np.broadcast_to(cid, g.shape)
    np.add.at(gimg, (cb, y0b, x0b), g * w00[None])
    np.add.at(gimg, (cb, y0b, x1b), g * w01[None])
    np.add.at(gimg, (cb, y1b, x0b), g * w10[None])
    np.add.at(gimg, (cb, y1b, x1b), g * w11[None])
    return gimg, gxs, gys
