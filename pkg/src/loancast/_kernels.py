"""Hot loops for convolution and pooling.

Two interchangeable implementations live here: numba ``@njit`` kernels and a
pure-numpy path built on strided views. Set ``LOANCAST_NUMBA=0`` before import
to force the numpy path (also used automatically when numba is missing).

All arrays are 5-D ``(N, C, D, H, W)``; 2-D callers pass ``D == 1``.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("LOANCAST_NUMBA", "1").lower() not in ("0", "false", "off", "no")


def out_extent(size, k, stride, pad=0):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- numpy path
#
# im2col layout: (N, C*kd*kh*kw, Do*Ho*Wo), rows ordered (c, a, b, e) and
# columns ordered (od, oh, ow), so ``weight.reshape(K, -1) @ cols[n]`` is
# already the (K, Do, Ho, Wo) output of sample n.

def _span(start, n, step):
    return slice(start, start + step * (n - 1) + 1, step)


def im2col_np(xp, ksize, stride):
    kd, kh, kw = ksize
    sd, sh, sw = stride
    n, c = xp.shape[:2]
    do, ho, wo = (out_extent(s, k, st) for s, k, st in zip(xp.shape[2:], ksize, stride))
    cols = np.empty((n, c, kd, kh, kw, do, ho, wo), dtype=xp.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                cols[:, :, a, b, e] = xp[:, :, _span(a, do, sd), _span(b, ho, sh), _span(e, wo, sw)]
    return cols.reshape(n, c * kd * kh * kw, do * ho * wo)


def col2im_np(cols, xp_shape, ksize, stride):
    n, c = xp_shape[:2]
    kd, kh, kw = ksize
    sd, sh, sw = stride
    do, ho, wo = (out_extent(s, k, st) for s, k, st in zip(xp_shape[2:], ksize, stride))
    c8 = cols.reshape(n, c, kd, kh, kw, do, ho, wo)
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                dxp[:, :, _span(a, do, sd), _span(b, ho, sh), _span(e, wo, sw)] += c8[:, :, a, b, e]
    return dxp


def maxpool_fwd_np(x, ksize, stride):
    kd, kh, kw = ksize
    sd, sh, sw = stride
    n, c, d, h, w = x.shape
    win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    do, ho, wo = win.shape[2:5]
    flat = win.reshape(n, c, do, ho, wo, kd * kh * kw)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    # translate window-local argmax to a flat index in the (D, H, W) volume
    a, rem = np.divmod(arg, kh * kw)
    b, e = np.divmod(rem, kw)
    od = np.arange(do).reshape(do, 1, 1) * sd
    oh = np.arange(ho).reshape(1, ho, 1) * sh
    ow = np.arange(wo).reshape(1, 1, wo) * sw
    idx = ((od + a) * h + (oh + b)) * w + (ow + e)
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_bwd_np(dout, idx, in_shape, overlapping):
    n, c = in_shape[:2]
    vol = in_shape[2] * in_shape[3] * in_shape[4]
    dx = np.zeros((n * c, vol), dtype=dout.dtype)
    rows = np.repeat(np.arange(n * c), idx[0, 0].size)
    if overlapping:
        np.add.at(dx, (rows, idx.reshape(-1)), dout.reshape(-1))
    else:
        dx[rows, idx.reshape(-1)] = dout.reshape(-1)
    return dx.reshape(in_shape)


# ---------------------------------------------------------------- numba path

if numba is not None:

    @numba.njit(cache=True)
    def _im2col_nb(xp, kd, kh, kw, sd, sh, sw, do, ho, wo):
        n, c, d, h, w = xp.shape
        rows = c * kd * kh * kw
        xf = xp.ravel()
        cols = np.empty(n * rows * do * ho * wo, dtype=xp.dtype)
        o = 0
        for i in range(n):
            for ch in range(c):
                cb = (i * c + ch) * d * h * w
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            for od in range(do):
                                for oh in range(ho):
                                    base = cb + ((od * sd + a) * h + oh * sh + b) * w + e
                                    for ow in range(wo):
                                        cols[o + ow] = xf[base + ow * sw]
                                    o += wo
        return cols.reshape(n, rows, do * ho * wo)

    @numba.njit(cache=True)
    def _col2im_nb(cols, dxp, kd, kh, kw, sd, sh, sw, do, ho, wo):
        n, c, d, h, w = dxp.shape
        cf = cols.ravel()
        df = dxp.ravel()
        o = 0
        for i in range(n):
            for ch in range(c):
                cb = (i * c + ch) * d * h * w
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            for od in range(do):
                                for oh in range(ho):
                                    base = cb + ((od * sd + a) * h + oh * sh + b) * w + e
                                    for ow in range(wo):
                                        df[base + ow * sw] += cf[o + ow]
                                    o += wo
        return dxp

    @numba.njit(cache=True)
    def _maxpool_fwd_nb(x, kd, kh, kw, sd, sh, sw, do, ho, wo):
        n, c, d, h, w = x.shape
        out = np.empty((n, c, do, ho, wo), dtype=x.dtype)
        idx = np.empty((n, c, do, ho, wo), dtype=np.int64)
        for i in range(n):
            for ch in range(c):
                for od in range(do):
                    for oh in range(ho):
                        for ow in range(wo):
                            d0, h0, w0 = od * sd, oh * sh, ow * sw
                            best = x[i, ch, d0, h0, w0]
                            bi = (d0 * h + h0) * w + w0
                            for a in range(kd):
                                for b in range(kh):
                                    for e in range(kw):
                                        v = x[i, ch, d0 + a, h0 + b, w0 + e]
                                        if v > best:
                                            best = v
                                            bi = ((d0 + a) * h + h0 + b) * w + w0 + e
                            out[i, ch, od, oh, ow] = best
                            idx[i, ch, od, oh, ow] = bi
        return out, idx

    @numba.njit(cache=True)
    def _maxpool_bwd_nb(dout, idx, dx):
        n, c, do, ho, wo = dout.shape
        for i in range(n):
            for ch in range(c):
                for od in range(do):
                    for oh in range(ho):
                        for ow in range(wo):
                            dx[i, ch, idx[i, ch, od, oh, ow]] += dout[i, ch, od, oh, ow]
        return dx

    def im2col_nb(xp, ksize, stride):
        do = out_extent(xp.shape[2], ksize[0], stride[0])
        ho = out_extent(xp.shape[3], ksize[1], stride[1])
        wo = out_extent(xp.shape[4], ksize[2], stride[2])
        return _im2col_nb(np.ascontiguousarray(xp), *ksize, *stride, do, ho, wo)

    def col2im_nb(cols, xp_shape, ksize, stride):
        do = out_extent(xp_shape[2], ksize[0], stride[0])
        ho = out_extent(xp_shape[3], ksize[1], stride[1])
        wo = out_extent(xp_shape[4], ksize[2], stride[2])
        dxp = np.zeros(xp_shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), dxp, *ksize, *stride, do, ho, wo)

    def maxpool_fwd_nb(x, ksize, stride):
        do = out_extent(x.shape[2], ksize[0], stride[0])
        ho = out_extent(x.shape[3], ksize[1], stride[1])
        wo = out_extent(x.shape[4], ksize[2], stride[2])
        return _maxpool_fwd_nb(np.ascontiguousarray(x), *ksize, *stride, do, ho, wo)

    def maxpool_bwd_nb(dout, idx, in_shape, overlapping):
        n, c = in_shape[:2]
        dx = np.zeros((n, c, in_shape[2] * in_shape[3] * in_shape[4]), dtype=dout.dtype)
        return _maxpool_bwd_nb(np.ascontiguousarray(dout), idx, dx).reshape(in_shape)


def select(use_numba):
    """Return ``(im2col, col2im, maxpool_fwd, maxpool_bwd)`` for one backend."""
    if use_numba:
        if numba is None:
            raise RuntimeError("numba is not installed")
        return im2col_nb, col2im_nb, maxpool_fwd_nb, maxpool_bwd_nb
    return im2col_np, col2im_np, maxpool_fwd_np, maxpool_bwd_np


im2col, col2im, maxpool_fwd, maxpool_bwd = select(USE_NUMBA)


def use_backend(use_numba):
    """Switch the active backend in place (callers look the kernels up per call)."""
    global im2col, col2im, maxpool_fwd, maxpool_bwd, USE_NUMBA
    im2col, col2im, maxpool_fwd, maxpool_bwd = select(use_numba)
    USE_NUMBA = bool(use_numba)
