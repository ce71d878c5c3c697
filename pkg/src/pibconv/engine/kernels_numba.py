"""Numba-accelerated kernels.

Only the kernels where tight per-cell loops actually win carry @njit:
depthwise convolution (forward and both backward passes) and 3x3 max
pooling, which additionally records the winning tap so its backward is a
pure scatter.  Dense and grouped-pointwise convolutions delegate to the
shared im2col/BLAS routines in kernels_numpy; scalar loops cannot beat
BLAS there.  Average pooling is a handful of vectorised shifted adds and
stays in numpy as well.

Compiled kernels are cached on disk, so the first call per process pays
the JIT cost once.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import kernels_numpy as _npk

conv_out_hw = _npk.conv_out_hw
avgpool2d_fwd = _npk.avgpool2d_fwd
avgpool2d_bwd = _npk.avgpool2d_bwd


@njit(cache=True)
def _dw_fwd(x, w, y, sh, sw, ph, pw, dh, dl):
    N, C, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = y.shape[2], y.shape[3]
    for n in range(N):
        for c in range(C):
            for oh in range(ho):
                ih0 = oh * sh - ph
                in_h = ih0 >= 0 and ih0 + dh * (kh - 1) < H
                for ow in range(wo):
                    iw0 = ow * sw - pw
                    acc = 0.0
                    if in_h and iw0 >= 0 and iw0 + dl * (kw - 1) < W:
                        for i in range(kh):
                            ih = ih0 + i * dh
                            for j in range(kw):
                                acc += x[n, c, ih, iw0 + j * dl] * w[c, 0, i, j]
                    else:
                        for i in range(kh):
                            ih = ih0 + i * dh
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(kw):
                                iw = iw0 + j * dl
                                if 0 <= iw < W:
                                    acc += x[n, c, ih, iw] * w[c, 0, i, j]
                    y[n, c, oh, ow] = acc


@njit(cache=True)
def _dw_bwd_x(gy, w, gx, sh, sw, ph, pw, dh, dl):
    N, C, H, W = gx.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = gy.shape[2], gy.shape[3]
    for n in range(N):
        for c in range(C):
            for oh in range(ho):
                ih0 = oh * sh - ph
                for ow in range(wo):
                    iw0 = ow * sw - pw
                    g = gy[n, c, oh, ow]
                    for i in range(kh):
                        ih = ih0 + i * dh
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(kw):
                            iw = iw0 + j * dl
                            if 0 <= iw < W:
                                gx[n, c, ih, iw] += g * w[c, 0, i, j]


@njit(cache=True)
def _dw_bwd_w(gy, x, gw, sh, sw, ph, pw, dh, dl):
    N, C, H, W = x.shape
    kh, kw = gw.shape[2], gw.shape[3]
    ho, wo = gy.shape[2], gy.shape[3]
    for n in range(N):
        for c in range(C):
            for oh in range(ho):
                ih0 = oh * sh - ph
                for ow in range(wo):
                    iw0 = ow * sw - pw
                    g = gy[n, c, oh, ow]
                    for i in range(kh):
                        ih = ih0 + i * dh
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(kw):
                            iw = iw0 + j * dl
                            if 0 <= iw < W:
                                gw[c, 0, i, j] += g * x[n, c, ih, iw]


def _is_depthwise(x, w, groups):
    return w.shape[1] == 1 and groups == x.shape[1] == w.shape[0]


def conv2d_fwd(x, w, sh, sw, ph, pw, dh, dw, groups):
    if _is_depthwise(x, w, groups):
        N, C, H, W = x.shape
        kh, kw = w.shape[2], w.shape[3]
        ho, wo = conv_out_hw(H, W, kh, kw, sh, sw, ph, pw, dh, dw)
        y = np.empty((N, C, ho, wo), dtype=x.dtype)
        _dw_fwd(np.ascontiguousarray(x), np.ascontiguousarray(w), y, sh, sw, ph, pw, dh, dw)
        return y
    return _npk.conv2d_fwd(x, w, sh, sw, ph, pw, dh, dw, groups)


def conv2d_bwd_x(gy, w, x_shape, sh, sw, ph, pw, dh, dw, groups):
    if w.shape[1] == 1 and groups == x_shape[1] == w.shape[0]:
        gx = np.zeros(x_shape, dtype=gy.dtype)
        _dw_bwd_x(np.ascontiguousarray(gy), np.ascontiguousarray(w), gx, sh, sw, ph, pw, dh, dw)
        return gx
    return _npk.conv2d_bwd_x(gy, w, x_shape, sh, sw, ph, pw, dh, dw, groups)


def conv2d_bwd_w(gy, x, w_shape, sh, sw, ph, pw, dh, dw, groups):
    if w_shape[1] == 1 and groups == x.shape[1] == w_shape[0]:
        gw = np.zeros(w_shape, dtype=gy.dtype)
        _dw_bwd_w(np.ascontiguousarray(gy), np.ascontiguousarray(x), gw, sh, sw, ph, pw, dh, dw)
        return gw
    return _npk.conv2d_bwd_w(gy, x, w_shape, sh, sw, ph, pw, dh, dw, groups)


@njit(cache=True)
def _maxpool3_fwd(x, y, idx, stride):
    N, C, H, W = x.shape
    ho, wo = y.shape[2], y.shape[3]
    for n in range(N):
        for c in range(C):
            for oh in range(ho):
                ih0 = oh * stride - 1
                for ow in range(wo):
                    iw0 = ow * stride - 1
                    best = -np.inf
                    tap = 0
                    for i in range(3):
                        ih = ih0 + i
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(3):
                            iw = iw0 + j
                            if 0 <= iw < W:
                                v = x[n, c, ih, iw]
                                if v > best:
                                    best = v
                                    tap = i * 3 + j
                    y[n, c, oh, ow] = best
                    idx[n, c, oh, ow] = tap


@njit(cache=True)
def _maxpool3_bwd(gy, idx, gx, stride):
    N, C, H, W = gx.shape
    ho, wo = gy.shape[2], gy.shape[3]
    for n in range(N):
        for c in range(C):
            for oh in range(ho):
                for ow in range(wo):
                    tap = idx[n, c, oh, ow]
                    ih = oh * stride - 1 + tap // 3
                    iw = ow * stride - 1 + tap % 3
                    gx[n, c, ih, iw] += gy[n, c, oh, ow]


def maxpool3_fwd(x, stride):
    N, C, H, W = x.shape
    ho = (H - 1) // stride + 1
    wo = (W - 1) // stride + 1
    y = np.empty((N, C, ho, wo), dtype=x.dtype)
    idx = np.empty((N, C, ho, wo), dtype=np.uint8)
    _maxpool3_fwd(np.ascontiguousarray(x), y, idx, stride)
    return y, idx


def maxpool3_bwd(gy, x, y, ctx, stride):
    gx = np.zeros(x.shape, dtype=gy.dtype)
    _maxpool3_bwd(np.ascontiguousarray(gy), ctx, gx, stride)
    return gx
