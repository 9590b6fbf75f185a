"""Hot loops of the forward/backward engine.

Each public kernel dispatches to a numba-compiled loop nest or to a
vectorised numpy equivalent depending on :func:`tinyprune._accel.use_numba`.
Both paths produce identical results up to float summation order.

Layout conventions: activations are ``[N, C, H, W]``; ``im2col`` returns a
``[C*kh*kw, N*Ho*Wo]`` matrix so a convolution is a single GEMM.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, use_numba


def out_size(size, k, s, p):
    return (size + 2 * p - k) // s + 1


# --------------------------------------------------------------------------
# numba loop nests
# --------------------------------------------------------------------------


@njit
def _im2col_nb(x, kh, kw, sh, sw, ph, pw, ho, wo, cols):
    n, c, h, w = x.shape
    L = ho * wo
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ci * kh + ki) * kw + kj
                for b in range(n):
                    base = b * L
                    for i in range(ho):
                        hi = i * sh + ki - ph
                        if hi < 0 or hi >= h:
                            for j in range(wo):
                                cols[row, base + i * wo + j] = 0.0
                            continue
                        for j in range(wo):
                            wj = j * sw + kj - pw
                            if wj < 0 or wj >= w:
                                cols[row, base + i * wo + j] = 0.0
                            else:
                                cols[row, base + i * wo + j] = x[b, ci, hi, wj]


@njit
def _col2im_nb(cols, kh, kw, sh, sw, ph, pw, ho, wo, dx):
    n, c, h, w = dx.shape
    L = ho * wo
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ci * kh + ki) * kw + kj
                for b in range(n):
                    base = b * L
                    for i in range(ho):
                        hi = i * sh + ki - ph
                        if hi < 0 or hi >= h:
                            continue
                        for j in range(wo):
                            wj = j * sw + kj - pw
                            if 0 <= wj < w:
                                dx[b, ci, hi, wj] += cols[row, base + i * wo + j]


@njit
def _maxpool_fwd_nb(x, k, s, p, ho, wo, out, arg):
    n, c, h, w = x.shape
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -np.inf
                    best_idx = -1
                    for ki in range(k):
                        hi = i * s + ki - p
                        if hi < 0 or hi >= h:
                            continue
                        for kj in range(k):
                            wj = j * s + kj - p
                            if wj < 0 or wj >= w:
                                continue
                            v = x[b, ci, hi, wj]
                            if v > best or best_idx < 0:
                                best = v
                                best_idx = hi * w + wj
                    out[b, ci, i, j] = best
                    arg[b, ci, i, j] = best_idx


@njit
def _maxpool_bwd_nb(dout, arg, dx):
    n, c, ho, wo = dout.shape
    w = dx.shape[3]
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    idx = arg[b, ci, i, j]
                    dx[b, ci, idx // w, idx % w] += dout[b, ci, i, j]


@njit
def _depthwise_fwd_nb(x, wt, sh, sw, ph, pw, ho, wo, out):
    n, c, h, w = x.shape
    kh, kw = wt.shape[2], wt.shape[3]
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ki in range(kh):
                        hi = i * sh + ki - ph
                        if hi < 0 or hi >= h:
                            continue
                        for kj in range(kw):
                            wj = j * sw + kj - pw
                            if 0 <= wj < w:
                                acc += x[b, ci, hi, wj] * wt[ci, 0, ki, kj]
                    out[b, ci, i, j] = acc


@njit
def _depthwise_bwd_nb(x, wt, dout, sh, sw, ph, pw, dx, dw):
    n, c, h, w = x.shape
    kh, kw = wt.shape[2], wt.shape[3]
    ho, wo = dout.shape[2], dout.shape[3]
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    g = dout[b, ci, i, j]
                    for ki in range(kh):
                        hi = i * sh + ki - ph
                        if hi < 0 or hi >= h:
                            continue
                        for kj in range(kw):
                            wj = j * sw + kj - pw
                            if 0 <= wj < w:
                                dx[b, ci, hi, wj] += g * wt[ci, 0, ki, kj]
                                dw[ci, 0, ki, kj] += g * x[b, ci, hi, wj]


# --------------------------------------------------------------------------
# numpy twins
# --------------------------------------------------------------------------


def _window_view(x, kh, kw, sh, sw, ph, pw, fill=0.0):
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _im2col_np(x, kh, kw, sh, sw, ph, pw):
    n, c = x.shape[:2]
    win = _window_view(x, kh, kw, sh, sw, ph, pw)  # N, C, Ho, Wo, kh, kw
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def _col2im_np(cols, x_shape, kh, kw, sh, sw, ph, pw, ho, wo):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    d = cols.reshape(c, kh, kw, n, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + sh * ho : sh, kj : kj + sw * wo : sw] += d[:, ki, kj].transpose(1, 0, 2, 3)
    return dxp[:, :, ph : ph + h, pw : pw + w]


# --------------------------------------------------------------------------
# dispatching API
# --------------------------------------------------------------------------


def im2col(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    ho, wo = out_size(h, kh, sh, ph), out_size(w, kw, sw, pw)
    if use_numba():
        cols = np.empty((c * kh * kw, n * ho * wo), dtype=x.dtype)
        _im2col_nb(np.ascontiguousarray(x), kh, kw, sh, sw, ph, pw, ho, wo, cols)
        return cols
    return _im2col_np(x, kh, kw, sh, sw, ph, pw)


def col2im(cols, x_shape, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x_shape
    ho, wo = out_size(h, kh, sh, ph), out_size(w, kw, sw, pw)
    if use_numba():
        dx = np.zeros(x_shape, dtype=cols.dtype)
        _col2im_nb(np.ascontiguousarray(cols), kh, kw, sh, sw, ph, pw, ho, wo, dx)
        return dx
    return _col2im_np(cols, x_shape, kh, kw, sh, sw, ph, pw, ho, wo)


def maxpool_forward(x, k, s, p):
    """Return pooled output and flat argmax positions (``h*W + w``) per window.

    Ties resolve to the first maximum in row-major window order.
    """
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, s, p), out_size(w, k, s, p)
    if use_numba():
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        arg = np.empty((n, c, ho, wo), dtype=np.int64)
        _maxpool_fwd_nb(np.ascontiguousarray(x), k, s, p, ho, wo, out, arg)
        return out, arg
    win = _window_view(x, k, k, s, s, p, p, fill=-np.inf).reshape(n, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * s + ki - p
    cols = np.arange(wo)[None, :] * s + kj - p
    return np.ascontiguousarray(out), rows * w + cols


def maxpool_backward(dout, arg, x_shape):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    if use_numba():
        _maxpool_bwd_nb(np.ascontiguousarray(dout), arg, dx)
        return dx
    n, c, h, w = x_shape
    flat = dx.reshape(n * c, h * w)
    offs = (np.arange(n * c) * (h * w))[:, None]
    np.add.at(flat.reshape(-1), (arg.reshape(n * c, -1) + offs).ravel(), dout.reshape(-1))
    return dx


def depthwise_forward(x, wt, sh, sw, ph, pw):
    n, c, h, w = x.shape
    kh, kw = wt.shape[2], wt.shape[3]
    ho, wo = out_size(h, kh, sh, ph), out_size(w, kw, sw, pw)
    if use_numba():
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        _depthwise_fwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(wt), sh, sw, ph, pw, ho, wo, out)
        return out
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out += xp[:, :, ki : ki + sh * ho : sh, kj : kj + sw * wo : sw] * wt[None, :, 0, ki, kj, None, None]
    return out


def depthwise_backward(x, wt, dout, sh, sw, ph, pw):
    n, c, h, w = x.shape
    kh, kw = wt.shape[2], wt.shape[3]
    if use_numba():
        dx = np.zeros_like(x)
        dw = np.zeros_like(wt)
        _depthwise_bwd_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(wt), np.ascontiguousarray(dout), sh, sw, ph, pw, dx, dw
        )
        return dx, dw
    ho, wo = dout.shape[2], dout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    dxp = np.zeros(xp.shape, dtype=x.dtype)
    dw = np.zeros_like(wt)
    for ki in range(kh):
        for kj in range(kw):
            sl = (slice(None), slice(None), slice(ki, ki + sh * ho, sh), slice(kj, kj + sw * wo, sw))
            dxp[sl] += dout * wt[None, :, 0, ki, kj, None, None]
            dw[:, 0, ki, kj] = np.einsum("nchw,nchw->c", dout, xp[sl])
    return dxp[:, :, ph : ph + h, pw : pw + w], dw
