# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the hot inner loops.

Mirrors invgfx.kernels.reference exactly, including the (channel, row,
column) accumulation order, so switching backends never changes results.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef cnp.ndarray _pad2d(double[:, :, ::1] x, int pad):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t i, j, k
    for i in range(c):
        for j in range(h):
            for k in range(w):
                ov[i, j + pad, k + pad] = x[i, j, k]
    return out


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] k, int stride, int pad):
    cdef Py_ssize_t co = k.shape[0], ci = k.shape[1], kh = k.shape[2], kw = k.shape[3]
    cdef cnp.ndarray xp_arr = _pad2d(x, pad) if pad > 0 else np.asarray(x)
    cdef double[:, :, ::1] xp = xp_arr
    cdef Py_ssize_t hp = xp.shape[1], wp = xp.shape[2]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.zeros((co, ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t o, c, u, v, i, j
    cdef double kv
    for o in range(co):
        for c in range(ci):
            for u in range(kh):
                for v in range(kw):
                    kv = k[o, c, u, v]
                    for i in range(ho):
                        for j in range(wo):
                            ov[o, i, j] += xp[c, i * stride + u, j * stride + v] * kv
    return out


def conv2d_grad_input(double[:, :, ::1] g, double[:, :, :, ::1] k, int stride, int pad,
                      x_shape):
    cdef Py_ssize_t co = k.shape[0], ci = k.shape[1], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t c = x_shape[0], h = x_shape[1], w = x_shape[2]
    cdef Py_ssize_t ho = g.shape[1], wo = g.shape[2]
    gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    cdef double[:, :, ::1] gv = gxp
    cdef Py_ssize_t o, cc, u, v, i, j
    cdef double kv
    for o in range(co):
        for cc in range(ci):
            for u in range(kh):
                for v in range(kw):
                    kv = k[o, cc, u, v]
                    for i in range(ho):
                        for j in range(wo):
                            gv[cc, i * stride + u, j * stride + v] += g[o, i, j] * kv
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + w])


def conv2d_grad_kernel(double[:, :, ::1] g, double[:, :, ::1] x, int stride, int pad,
                       k_shape):
    cdef Py_ssize_t co = k_shape[0], ci = k_shape[1], kh = k_shape[2], kw = k_shape[3]
    cdef cnp.ndarray xp_arr = _pad2d(x, pad) if pad > 0 else np.asarray(x)
    cdef double[:, :, ::1] xp = xp_arr
    cdef Py_ssize_t ho = g.shape[1], wo = g.shape[2]
    gk = np.zeros((co, ci, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gv = gk
    cdef Py_ssize_t o, c, u, v, i, j
    cdef double gval
    # (i, j) outer keeps the xp reads row-local for every kernel tap.
    for o in range(co):
        for c in range(ci):
            for i in range(ho):
                for j in range(wo):
                    gval = g[o, i, j]
                    for u in range(kh):
                        for v in range(kw):
                            gv[o, c, u, v] += gval * xp[c, i * stride + u, j * stride + v]
    return gk


def avg_pool_forward(double[:, :, ::1] x, int window, int stride):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = (h - window) // stride + 1
    cdef Py_ssize_t wo = (w - window) // stride + 1
    out = np.zeros((c, ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef double area = <double>(window * window)
    cdef Py_ssize_t cc, u, v, i, j
    # Tap-major accumulation and a true division keep results bit-identical
    # to the reference backend (multiplying by a reciprocal differs for
    # window areas that are not powers of two).
    for u in range(window):
        for v in range(window):
            for cc in range(c):
                for i in range(ho):
                    for j in range(wo):
                        ov[cc, i, j] += x[cc, i * stride + u, j * stride + v]
    for cc in range(c):
        for i in range(ho):
            for j in range(wo):
                ov[cc, i, j] /= area
    return out


def avg_pool_grad(double[:, :, ::1] g, int window, int stride, x_shape):
    cdef Py_ssize_t c = x_shape[0], h = x_shape[1], w = x_shape[2]
    cdef Py_ssize_t ho = g.shape[1], wo = g.shape[2]
    gx = np.zeros((c, h, w), dtype=np.float64)
    cdef double[:, :, ::1] gv = gx
    cdef double area = <double>(window * window)
    cdef Py_ssize_t cc, u, v, i, j
    for u in range(window):
        for v in range(window):
            for cc in range(c):
                for i in range(ho):
                    for j in range(wo):
                        gv[cc, i * stride + u, j * stride + v] += g[cc, i, j] / area
    return gx


def bilinear_forward(double[:, :, ::1] img, double[:, ::1] xs, double[:, ::1] ys):
    cdef Py_ssize_t c = img.shape[0], h = img.shape[1], w = img.shape[2]
    cdef Py_ssize_t ho = xs.shape[0], wo = xs.shape[1]
    out = np.empty((c, ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t i, j, cc, x0, y0, x1, y1
    cdef double xc, yc, fx, fy, v00, v01, v10, v11, top, bot
    for i in range(ho):
        for j in range(wo):
            xc = xs[i, j]
            yc = ys[i, j]
            if xc < 0.0:
                xc = 0.0
            elif xc > w - 1.0:
                xc = w - 1.0
            if yc < 0.0:
                yc = 0.0
            elif yc > h - 1.0:
                yc = h - 1.0
            x0 = <Py_ssize_t>xc
            y0 = <Py_ssize_t>yc
            if x0 > w - 1:
                x0 = w - 1
            if y0 > h - 1:
                y0 = h - 1
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fx = xc - x0
            fy = yc - y0
            for cc in range(c):
                v00 = img[cc, y0, x0]
                v01 = img[cc, y0, x1]
                v10 = img[cc, y1, x0]
                v11 = img[cc, y1, x1]
                top = v00 + fx * (v01 - v00)
                bot = v10 + fx * (v11 - v10)
                ov[cc, i, j] = top + fy * (bot - top)
    return out


def bilinear_grad(double[:, :, ::1] img, double[:, ::1] xs, double[:, ::1] ys,
                  double[:, :, ::1] g):
    cdef Py_ssize_t c = img.shape[0], h = img.shape[1], w = img.shape[2]
    cdef Py_ssize_t ho = xs.shape[0], wo = xs.shape[1]
    gimg = np.zeros((c, h, w), dtype=np.float64)
    gxs = np.zeros((ho, wo), dtype=np.float64)
    gys = np.zeros((ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] giv = gimg
    cdef double[:, ::1] gxv = gxs
    cdef double[:, ::1] gyv = gys
    cdef Py_ssize_t i, j, cc, x0, y0, x1, y1
    cdef double xc, yc, fx, fy, gval, accx, accy
    cdef double v00, v01, v10, v11
    cdef bint inx, iny
    for i in range(ho):
        for j in range(wo):
            xc = xs[i, j]
            yc = ys[i, j]
            inx = (xc > 0.0) and (xc < w - 1.0)
            iny = (yc > 0.0) and (yc < h - 1.0)
            if xc < 0.0:
                xc = 0.0
            elif xc > w - 1.0:
                xc = w - 1.0
            if yc < 0.0:
                yc = 0.0
            elif yc > h - 1.0:
                yc = h - 1.0
            x0 = <Py_ssize_t>xc
            y0 = <Py_ssize_t>yc
            if x0 > w - 1:
                x0 = w - 1
            if y0 > h - 1:
                y0 = h - 1
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fx = xc - x0
            fy = yc - y0
            accx = 0.0
            accy = 0.0
            for cc in range(c):
                gval = g[cc, i, j]
                v00 = img[cc, y0, x0]
                v01 = img[cc, y0, x1]
                v10 = img[cc, y1, x0]
                v11 = img[cc, y1, x1]
                accx += gval * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                accy += gval * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                giv[cc, y0, x0] += gval * (1.0 - fx) * (1.0 - fy)
                giv[cc, y0, x1] += gval * fx * (1.0 - fy)
                giv[cc, y1, x0] += gval * (1.0 - fx) * fy
                giv[cc, y1, x1] += gval * fx * fy
            if inx:
                gxv[i, j] = accx
            if iny:
                gyv[i, j] = accy
    return gimg, gxs, gys
