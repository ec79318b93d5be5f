"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Data-movement kernels and the forward convolution perform the same
floating-point operations in the same order as their compiled twins, so
they match bit for bit. The weight- and bias-gradient reductions of
``conv_direct_backward`` sum in a different order and agree only to
rounding.
"""

import numpy as np


def haar_fwd_level(src, out, n, m):
    a = src[0:n:2, 0:m:2]
    b = src[0:n:2, 1:m:2]
    c = src[1:n:2, 0:m:2]
    d = src[1:n:2, 1:m:2]
    hn, hm = n // 2, m // 2
    out[:hn, :hm] = ((a + b) + (c + d)) * 0.5
    out[:hn, hm:m] = ((a - b) + (c - d)) * 0.5
    out[hn:n, :hm] = ((a + b) - (c + d)) * 0.5
    out[hn:n, hm:m] = ((a - b) - (c - d)) * 0.5


def haar_inv_level(coef, out, n, m):
    hn, hm = n // 2, m // 2
    ll = coef[:hn, :hm]
    hl = coef[:hn, hm:m]
    lh = coef[hn:n, :hm]
    hh = coef[hn:n, hm:m]
    out[0:n:2, 0:m:2] = ((ll + hl) + (lh + hh)) * 0.5
    out[0:n:2, 1:m:2] = ((ll - hl) + (lh - hh)) * 0.5
    out[1:n:2, 0:m:2] = ((ll + hl) - (lh + hh)) * 0.5
    out[1:n:2, 1:m:2] = ((ll - hl) - (lh - hh)) * 0.5


def im2col(x, k, stride, pad):
    C, B, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
    return cols.reshape(C * k * k, B * Ho * Wo)


def col2im(cols, C, B, H, W, k, stride, pad):
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols6 = cols.reshape(C, k, k, B, Ho, Wo)
    out = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += cols6[:, ki, kj]
    return out[:, :, pad:pad + H, pad:pad + W].copy()


def _valid(n_out, n_in, offset, stride, pad):
    lo = 0
    while lo < n_out and lo * stride + offset - pad < 0:
        lo += 1
    hi = n_out
    while hi > lo and (hi - 1) * stride + offset - pad >= n_in:
        hi -= 1
    start = lo * stride + offset - pad
    return slice(lo, hi), slice(start, start + (hi - lo - 1) * stride + 1, stride)


def conv_direct_forward(x, w, bias, stride, pad):
    C, B, H, W = x.shape
    O, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.empty((O, B, Ho, Wo))
    out[:] = bias[:, None, None, None]
    for c in range(C):
        for ki in range(k):
            orow, irow = _valid(Ho, H, ki, stride, pad)
            for kj in range(k):
                ocol, icol = _valid(Wo, W, kj, stride, pad)
                xs = x[c, :, irow, icol]
                for o in range(O):
                    out[o, :, orow, ocol] += w[o, c, ki, kj] * xs
    return out


def conv_direct_backward(dout, x, w, stride, pad, need_input):
    C, B, H, W = x.shape
    O, _, k, _ = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    db = dout.reshape(O, -1).sum(axis=1)
    cols = im2col(x, k, stride, pad)
    dw = (dout.reshape(O, -1) @ cols.T).reshape(w.shape)
    dx = None
    if need_input:
        dx = np.zeros((C, B, H, W))
        for o in range(O):
            for c in range(C):
                for ki in range(k):
                    orow, irow = _valid(Ho, H, ki, stride, pad)
                    for kj in range(k):
                        ocol, icol = _valid(Wo, W, kj, stride, pad)
                        dx[c, :, irow, icol] += w[o, c, ki, kj] * dout[o, :, orow, ocol]
    return dx, dw, db


def channel_max(y):
    idx = y.argmax(axis=0)
    return np.take_along_axis(y, idx[None], axis=0)[0], idx


def scatter_channel_add(dy, idx, vals):
    np.put_along_axis(dy, idx[None], np.take_along_axis(dy, idx[None], axis=0) + vals[None], axis=0)


def gate_forward(x, cgate):
    y = x * cgate[:, :, None, None]
    mx, idx = channel_max(y)
    return y, np.stack([y.mean(axis=0), mx]), idx


def gate_backward(dout, x, sgate, cgate, dmaps, idx):
    dy = dout * sgate + dmaps[0] / x.shape[0]
    scatter_channel_add(dy, idx, dmaps[1])
    return dy * cgate[:, :, None, None], (dy * x).sum(axis=(2, 3))
