"""Pure numpy conv/pool kernels (im2col + BLAS, shifted-slice pooling).

This module is the fallback backend and also hosts the dense-conv
routines the numba backend delegates to.  All reductions have a fixed
order, so results are reproducible bit-for-bit within one build.
"""

from __future__ import annotations

import numpy as np


def conv_out_hw(H, W, kh, kw, sh, sw, ph, pw, dh, dw):
    ho = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    return ho, wo


def _im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo):
    """Return contiguous columns [N, C*kh*kw, ho*wo] of the padded input."""
    N, C, H, W = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        (N, C, kh, kw, ho, wo),
        (s0, s1, s2 * dh, s3 * dw, s2 * sh, s3 * sw),
    )
    return np.ascontiguousarray(view).reshape(N, C * kh * kw, ho * wo)


def conv2d_fwd(x, w, sh, sw, ph, pw, dh, dw, groups):
    N, Cin, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    ho, wo = conv_out_hw(H, W, kh, kw, sh, sw, ph, pw, dh, dw)
    cols = _im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    cols = cols.reshape(N, groups, Cg * kh * kw, ho * wo)
    wg = w.reshape(groups, Cout // groups, Cg * kh * kw)
    out = np.matmul(wg[None], cols)
    return out.reshape(N, Cout, ho, wo)


def _col2im(dcols, x_shape, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo):
    """Scatter-add column gradients [N, C, kh, kw, ho, wo] back to input."""
    N, C, H, W = x_shape
    dxp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=dcols.dtype)
    for i in range(kh):
        hi = i * dh
        for j in range(kw):
            wj = j * dw
            dxp[:, :, hi : hi + sh * ho : sh, wj : wj + sw * wo : sw] += dcols[:, :, i, j]
    if ph or pw:
        return np.ascontiguousarray(dxp[:, :, ph : ph + H, pw : pw + W])
    return dxp


def conv2d_bwd_x(gy, w, x_shape, sh, sw, ph, pw, dh, dw, groups):
    N = gy.shape[0]
    Cout, Cg, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gy_r = gy.reshape(N, groups, Cout // groups, ho * wo)
    wg = w.reshape(groups, Cout // groups, Cg * kh * kw)
    dcols = np.matmul(wg.transpose(0, 2, 1)[None], gy_r)
    dcols = dcols.reshape(N, groups * Cg, kh, kw, ho, wo)
    return _col2im(dcols, x_shape, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)


def conv2d_bwd_w(gy, x, w_shape, sh, sw, ph, pw, dh, dw, groups):
    N = x.shape[0]
    Cout, Cg, kh, kw = w_shape
    ho, wo = gy.shape[2], gy.shape[3]
    cols = _im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    cols = cols.reshape(N, groups, Cg * kh * kw, ho * wo)
    gy_r = gy.reshape(N, groups, Cout // groups, ho * wo)
    gw = np.matmul(gy_r, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return gw.reshape(w_shape)


# ---------------------------------------------------------------------------
# pooling (3x3 max with pad 1; general average with padded cells excluded
# from the divisor)
# ---------------------------------------------------------------------------


def maxpool3_fwd(x, stride):
    N, C, H, W = x.shape
    ho = (H - 1) // stride + 1
    wo = (W - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    y = np.full((N, C, ho, wo), -np.inf, dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            np.maximum(y, xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride], out=y)
    return y, None


def maxpool3_bwd(gy, x, y, ctx, stride):
    # Recompute the winning cell; ties resolve to the first window cell in
    # row-major order, matching an argmax scan.
    N, C, H, W = x.shape
    ho, wo = gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    gxp = np.zeros_like(xp)
    claimed = np.zeros(gy.shape, dtype=bool)
    for i in range(3):
        for j in range(3):
            xs = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            hit = (xs == y) & ~claimed
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gy * hit
            claimed |= hit
    return np.ascontiguousarray(gxp[:, :, 1 : 1 + H, 1 : 1 + W])


def _avg_counts(H, W, kh, kw, sh, sw, ph, pw, ho, wo):
    ch = np.zeros(ho, dtype=np.int64)
    for oh in range(ho):
        lo = oh * sh - ph
        ch[oh] = min(lo + kh, H) - max(lo, 0)
    cw = np.zeros(wo, dtype=np.int64)
    for ow in range(wo):
        lo = ow * sw - pw
        cw[ow] = min(lo + kw, W) - max(lo, 0)
    return np.outer(ch, cw)


def avgpool2d_fwd(x, kh, kw, sh, sw, ph, pw):
    N, C, H, W = x.shape
    ho, wo = conv_out_hw(H, W, kh, kw, sh, sw, ph, pw, 1, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    acc = np.zeros((N, C, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    counts = _avg_counts(H, W, kh, kw, sh, sw, ph, pw, ho, wo)
    return acc / counts.astype(x.dtype)


def avgpool2d_bwd(gy, x_shape, kh, kw, sh, sw, ph, pw):
    N, C, H, W = x_shape
    ho, wo = gy.shape[2], gy.shape[3]
    counts = _avg_counts(H, W, kh, kw, sh, sw, ph, pw, ho, wo)
    g = gy / counts.astype(gy.dtype)
    gxp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g
    if ph or pw:
        return np.ascontiguousarray(gxp[:, :, ph : ph + H, pw : pw + W])
    return gxp
