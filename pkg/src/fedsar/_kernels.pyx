# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; numpy twins live in ``_fallback``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def haar_fwd_level(double[:, ::1] src, double[:, ::1] out, Py_ssize_t n, Py_ssize_t m):
    cdef Py_ssize_t i, j, hn = n // 2, hm = m // 2
    cdef double a, b, c, d
    for i in range(hn):
        for j in range(hm):
            a = src[2 * i, 2 * j]
            b = src[2 * i, 2 * j + 1]
            c = src[2 * i + 1, 2 * j]
            d = src[2 * i + 1, 2 * j + 1]
            out[i, j] = ((a + b) + (c + d)) * 0.5
            out[i, j + hm] = ((a - b) + (c - d)) * 0.5
            out[i + hn, j] = ((a + b) - (c + d)) * 0.5
            out[i + hn, j + hm] = ((a - b) - (c - d)) * 0.5


def haar_inv_level(double[:, ::1] coef, double[:, ::1] out, Py_ssize_t n, Py_ssize_t m):
    cdef Py_ssize_t i, j, hn = n // 2, hm = m // 2
    cdef double ll, hl, lh, hh
    for i in range(hn):
        for j in range(hm):
            ll = coef[i, j]
            hl = coef[i, j + hm]
            lh = coef[i + hn, j]
            hh = coef[i + hn, j + hm]
            out[2 * i, 2 * j] = ((ll + hl) + (lh + hh)) * 0.5
            out[2 * i, 2 * j + 1] = ((ll - hl) + (lh - hh)) * 0.5
            out[2 * i + 1, 2 * j] = ((ll + hl) - (lh + hh)) * 0.5
            out[2 * i + 1, 2 * j + 1] = ((ll - hl) - (lh - hh)) * 0.5


def im2col(double[:, :, :, ::1] x, int k, int stride, int pad):
    """``x`` is channel-major ``(C, B, H, W)``; returns ``(C*k*k, B*Ho*Wo)``."""
    cdef Py_ssize_t C = x.shape[0], B = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cdef Py_ssize_t P = Ho * Wo
    cols_arr = np.zeros((C * k * k, B * P), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, c, ki, kj, oh, ow, ih, iw, row, base
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for b in range(B):
                    base = b * P
                    for oh in range(Ho):
                        ih = oh * stride + ki - pad
                        if ih < 0 or ih >= H:
                            continue
                        for ow in range(Wo):
                            iw = ow * stride + kj - pad
                            if iw < 0 or iw >= W:
                                continue
                            cols[row, base + oh * Wo + ow] = x[c, b, ih, iw]
    return cols_arr


def col2im(double[:, ::1] cols, Py_ssize_t C, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W,
           int k, int stride, int pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``(C, B, H, W)``."""
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cdef Py_ssize_t P = Ho * Wo
    out_arr = np.zeros((C, B, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, ki, kj, oh, ow, ih, iw, row, base
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for b in range(B):
                    base = b * P
                    for oh in range(Ho):
                        ih = oh * stride + ki - pad
                        if ih < 0 or ih >= H:
                            continue
                        for ow in range(Wo):
                            iw = ow * stride + kj - pad
                            if iw < 0 or iw >= W:
                                continue
                            out[c, b, ih, iw] += cols[row, base + oh * Wo + ow]
    return out_arr


def conv_direct_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[::1] bias, int stride, int pad):
    """Direct convolution for layers with few input channels.

    ``x`` is ``(C, B, H, W)``, ``w`` is ``(O, C, k, k)``; returns ``(O, B, Ho, Wo)``.
    """
    cdef Py_ssize_t C = x.shape[0], B = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    out_arr = np.empty((O, B, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t o, c, ki, kj, b, oh, ow, ih, lo, hi
    cdef double wv, bv
    for o in range(O):
        bv = bias[o]
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    out[o, b, oh, ow] = bv
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    wv = w[o, c, ki, kj]
                    lo, hi = _valid_range(Wo, W, kj, stride, pad)
                    for b in range(B):
                        for oh in range(Ho):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(lo, hi):
                                out[o, b, oh, ow] = out[o, b, oh, ow] + wv * x[c, b, ih, ow * stride + kj - pad]
    return out_arr


def conv_direct_backward(double[:, :, :, ::1] dout, double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                         int stride, int pad, bint need_input):
    """Gradients of :func:`conv_direct_forward`: ``(dx or None, dw, db)``.

    The weight and bias gradients go through im2col and one GEMM, the same
    reduction as the numpy twin, so both backends agree bit for bit.
    """
    cdef Py_ssize_t C = x.shape[0], B = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = dout.shape[2], Wo = dout.shape[3]
    d2 = np.asarray(dout).reshape(O, -1)
    db_arr = d2.sum(axis=1)
    dw_arr = (d2 @ im2col(x, k, stride, pad).T).reshape(O, C, k, k)
    if not need_input:
        return None, dw_arr, db_arr
    dx_arr = np.zeros((C, B, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t o, c, ki, kj, b, oh, ow, ih, lo, hi
    cdef double wv
    for o in range(O):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    lo, hi = _valid_range(Wo, W, kj, stride, pad)
                    wv = w[o, c, ki, kj]
                    for b in range(B):
                        for oh in range(Ho):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(lo, hi):
                                dx[c, b, ih, ow * stride + kj - pad] = (
                                    dx[c, b, ih, ow * stride + kj - pad] + wv * dout[o, b, oh, ow]
                                )
    return dx_arr, dw_arr, db_arr


cdef inline (Py_ssize_t, Py_ssize_t) _valid_range(Py_ssize_t Wo, Py_ssize_t W, Py_ssize_t kj,
                                                  Py_ssize_t stride, Py_ssize_t pad):
    # output columns whose input column ow*stride + kj - pad lies in [0, W)
    cdef Py_ssize_t lo = 0, hi = Wo
    while lo < Wo and lo * stride + kj - pad < 0:
        lo += 1
    while hi > lo and (hi - 1) * stride + kj - pad >= W:
        hi -= 1
    return lo, hi


def channel_max(double[:, :, :, ::1] y):
    """Max over axis 0 of ``(C, B, H, W)`` and the first index attaining it."""
    cdef Py_ssize_t C = y.shape[0], B = y.shape[1], H = y.shape[2], W = y.shape[3]
    mx_arr = np.empty((B, H, W), dtype=np.float64)
    idx_arr = np.zeros((B, H, W), dtype=np.int64)
    cdef double[:, :, ::1] mx = mx_arr
    cdef cnp.int64_t[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t c, b, i, j
    for b in range(B):
        for i in range(H):
            for j in range(W):
                mx[b, i, j] = y[0, b, i, j]
    for c in range(1, C):
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    if y[c, b, i, j] > mx[b, i, j]:
                        mx[b, i, j] = y[c, b, i, j]
                        idx[b, i, j] = c
    return mx_arr, idx_arr


def scatter_channel_add(double[:, :, :, ::1] dy, cnp.int64_t[:, :, ::1] idx, double[:, :, ::1] vals):
    """In place: ``dy[idx[b,i,j], b, i, j] += vals[b, i, j]``."""
    cdef Py_ssize_t B = dy.shape[1], H = dy.shape[2], W = dy.shape[3]
    cdef Py_ssize_t b, i, j
    for b in range(B):
        for i in range(H):
            for j in range(W):
                dy[idx[b, i, j], b, i, j] += vals[b, i, j]


def gate_forward(double[:, :, :, ::1] x, double[:, ::1] cgate):
    """Channel gating fused with the spatial-gate inputs.

    Returns ``y = x * cgate`` (per channel and sample), the stacked
    ``(2, B, H, W)`` channel-mean and channel-max maps of ``y`` and the
    first channel attaining the max.
    """
    cdef Py_ssize_t C = x.shape[0], B = x.shape[1], H = x.shape[2], W = x.shape[3]
    y_arr = np.empty((C, B, H, W), dtype=np.float64)
    maps_arr = np.empty((2, B, H, W), dtype=np.float64)
    idx_arr = np.zeros((B, H, W), dtype=np.int64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef double[:, :, :, ::1] maps = maps_arr
    cdef cnp.int64_t[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t c, b, i, j
    cdef double g, v
    for b in range(B):
        g = cgate[0, b]
        for i in range(H):
            for j in range(W):
                v = x[0, b, i, j] * g
                y[0, b, i, j] = v
                maps[0, b, i, j] = v
                maps[1, b, i, j] = v
    for c in range(1, C):
        for b in range(B):
            g = cgate[c, b]
            for i in range(H):
                for j in range(W):
                    v = x[c, b, i, j] * g
                    y[c, b, i, j] = v
                    maps[0, b, i, j] = maps[0, b, i, j] + v
                    if v > maps[1, b, i, j]:
                        maps[1, b, i, j] = v
                        idx[b, i, j] = c
    for b in range(B):
        for i in range(H):
            for j in range(W):
                maps[0, b, i, j] = maps[0, b, i, j] / C
    return y_arr, maps_arr, idx_arr


def gate_backward(double[:, :, :, ::1] dout, double[:, :, :, ::1] x, double[:, :, ::1] sgate,
                  double[:, ::1] cgate, double[:, :, :, ::1] dmaps, cnp.int64_t[:, :, ::1] idx):
    """Input side of the gate gradient.

    With ``dy = dout * sgate + dmaps[0] / C`` plus ``dmaps[1]`` routed to
    the argmax channel, returns ``dx = dy * cgate`` and
    ``dcgate[c, b] = sum over pixels of dy * x``.
    """
    cdef Py_ssize_t C = x.shape[0], B = x.shape[1], H = x.shape[2], W = x.shape[3]
    dx_arr = np.empty((C, B, H, W), dtype=np.float64)
    dc_arr = np.empty((C, B), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, ::1] dc = dc_arr
    cdef Py_ssize_t c, b, i, j
    cdef double g, v, acc
    for c in range(C):
        for b in range(B):
            g = cgate[c, b]
            acc = 0.0
            for i in range(H):
                for j in range(W):
                    v = dout[c, b, i, j] * sgate[b, i, j] + dmaps[0, b, i, j] / C
                    if idx[b, i, j] == c:
                        v = v + dmaps[1, b, i, j]
                    dx[c, b, i, j] = v * g
                    acc = acc + v * x[c, b, i, j]
            dc[c, b] = acc
    return dx_arr, dc_arr
