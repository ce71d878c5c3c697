"""Differentiable array ops.

Every op runs eagerly on ndarrays and records itself on the active Tape
when tracing is on.  Backward closures capture whatever forward state
they need (including the kernel module in use at call time, so switching
backends mid-graph cannot mismatch forward and backward).  They return
one gradient per input, None for inputs that don't need one, and never
mutate the gradient they receive.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from . import backend
from .tensor import Tensor, active_tape

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _make(out_data, inputs, bwd) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.traced for t in inputs):
        out = Tensor(out_data, traced=True)
        tape.record(out, inputs, bwd)
        return out
    return Tensor(out_data)


def _pair(v):
    if isinstance(v, tuple):
        return v
    return (v, v)


# ---------------------------------------------------------------------------
# convolution and friends
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, dilation=1, groups: int = 1) -> Tensor:
    cin, cout = x.shape[1], w.shape[0]
    if cin % groups or cout % groups or cin // groups != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x C={cin}, w {w.shape}, groups={groups}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    k = backend.kernels()
    y = k.conv2d_fwd(x.data, w.data, sh, sw, ph, pw, dh, dw, groups)
    if min(y.shape[2:]) < 1:
        raise ValueError(f"conv2d produced empty output {y.shape}")
    if b is not None:
        y = y + b.data[None, :, None, None]
    x_shape, w_shape = x.data.shape, w.data.shape
    need_x, need_w = x.traced, w.traced

    def bwd(g):
        gx = k.conv2d_bwd_x(g, w.data, x_shape, sh, sw, ph, pw, dh, dw, groups) if need_x else None
        gw = k.conv2d_bwd_w(g, x.data, w_shape, sh, sw, ph, pw, dh, dw, groups) if need_w else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if b.traced else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(y, inputs, bwd)


def windowed_pointwise(x: Tensor, w: Tensor, starts: np.ndarray) -> Tensor:
    """Banded 1x1 conv: output channel j mixes a contiguous window of
    ``w.shape[1]`` input channels beginning at ``starts[j]``.

    Keeps exactly out_channels * window weights regardless of whether the
    channel counts admit a standard grouped convolution.
    """
    cout, win = w.shape
    N, cin, H, W = x.shape
    y = np.empty((N, cout, H, W), dtype=x.data.dtype)
    for j in range(cout):
        s = int(starts[j])
        y[:, j] = np.einsum("nchw,c->nhw", x.data[:, s : s + win], w.data[j])
    need_x, need_w = x.traced, w.traced

    def bwd(g):
        gx = np.zeros_like(x.data) if need_x else None
        gw = np.zeros_like(w.data) if need_w else None
        for j in range(cout):
            s = int(starts[j])
            if need_x:
                gx[:, s : s + win] += g[:, j : j + 1] * w.data[j][None, :, None, None]
            if need_w:
                gw[j] = np.einsum("nhw,nchw->c", g[:, j], x.data[:, s : s + win])
        return gx, gw

    return _make(y, (x, w), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def bwd(g):
        gx = g @ w.data.T if x.traced else None
        gw = x.data.T @ g if w.traced else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=0) if b.traced else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(y, inputs, bwd)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def bwd(g):
        return (np.where(x.data > 0, g, 0),)

    return _make(y, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    # Exact erf form; the backward reuses the cached CDF.
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(y, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def batch_norm_train(x: Tensor, gamma, beta, eps: float):
    """Normalize with batch statistics.  Returns (y, mean, biased_var) so
    the owning module can fold the batch stats into its running buffers."""
    xd = x.data
    M = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3), keepdims=True)
    var = ((xd - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * ivstd
    if gamma is not None:
        y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    else:
        y = xhat

    def bwd(g):
        dxhat = g * gamma.data[None, :, None, None] if gamma is not None else g
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (ivstd / M) * (M * dxhat - s1 - xhat * s2) if x.traced else None
        if gamma is None:
            return (gx,)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.traced else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.traced else None
        return gx, ggamma, gbeta

    inputs = (x,) if gamma is None else (x, gamma, beta)
    out = _make(y, inputs, bwd)
    return out, mean.reshape(-1), var.reshape(-1)


def batch_norm_eval(x: Tensor, gamma, beta, mean: np.ndarray, var: np.ndarray, eps: float) -> Tensor:
    scale_ = 1.0 / np.sqrt(var + eps)
    if gamma is not None:
        scale_ = scale_ * gamma.data
    shift = -mean * scale_
    if beta is not None:
        shift = shift + beta.data
    sc = scale_[None, :, None, None].astype(x.data.dtype)
    y = x.data * sc + shift[None, :, None, None].astype(x.data.dtype)

    def bwd(g):
        gx = g * sc if x.traced else None
        if gamma is None:
            return (gx,)
        ivstd = 1.0 / np.sqrt(var + eps)
        xh = (x.data - mean[None, :, None, None]) * ivstd[None, :, None, None]
        ggamma = (g * xh).sum(axis=(0, 2, 3)) if gamma.traced else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.traced else None
        return gx, ggamma, gbeta

    inputs = (x,) if gamma is None else (x, gamma, beta)
    return _make(y, inputs, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Per-sample normalization over (C, H, W) with per-channel affine."""
    xd = x.data
    D = xd.shape[1] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(1, 2, 3), keepdims=True)
    var = ((xd - mean) ** 2).mean(axis=(1, 2, 3), keepdims=True)
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * ivstd
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        dxhat = g * gamma.data[None, :, None, None]
        s1 = dxhat.sum(axis=(1, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(1, 2, 3), keepdims=True)
        gx = (ivstd / D) * (D * dxhat - s1 - xhat * s2) if x.traced else None
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.traced else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.traced else None
        return gx, ggamma, gbeta

    return _make(y, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# pooling / spatial
# ---------------------------------------------------------------------------


def max_pool3(x: Tensor, stride: int = 1) -> Tensor:
    k = backend.kernels()
    y, ctx = k.maxpool3_fwd(x.data, stride)

    def bwd(g):
        return (k.maxpool3_bwd(g, x.data, y, ctx, stride),)

    return _make(y, (x,), bwd)


def avg_pool2d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    k = backend.kernels()
    y = k.avgpool2d_fwd(x.data, kh, kw, sh, sw, ph, pw)
    x_shape = x.data.shape

    def bwd(g):
        return (k.avgpool2d_bwd(g, x_shape, kh, kw, sh, sw, ph, pw),)

    return _make(y, (x,), bwd)


def avg_pool3(x: Tensor, stride: int = 1) -> Tensor:
    return avg_pool2d(x, 3, stride, 1)


def global_avg_pool(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    y = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), (N, C, H, W)),)

    return _make(y, (x,), bwd)


def flatten2d(x: Tensor) -> Tensor:
    shape = x.data.shape
    y = np.ascontiguousarray(x.data).reshape(shape[0], -1)

    def bwd(g):
        return (g.reshape(shape),)

    return _make(y, (x,), bwd)


def crop_offset(x: Tensor, dh: int, dw: int) -> Tensor:
    """Drop the first dh rows / dw columns (shifted view for paired
    stride-2 paths)."""
    y = x.data[:, :, dh:, dw:]
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, dh:, dw:] = g
        return (gx,)

    return _make(y, (x,), bwd)


def zeros_spatial(x: Tensor, stride: int = 1, channels=None) -> Tensor:
    """The 'none' edge: a zero map with pooled spatial dims, no grad flow."""
    N, C, H, W = x.shape
    if channels is None:
        channels = C
    ho = (H - 1) // stride + 1
    wo = (W - 1) // stride + 1
    return Tensor(np.zeros((N, channels, ho, wo), dtype=x.data.dtype))


# ---------------------------------------------------------------------------
# arithmetic / combination
# ---------------------------------------------------------------------------


def add(*xs: Tensor) -> Tensor:
    y = xs[0].data
    for t in xs[1:]:
        y = y + t.data

    def bwd(g):
        return (g,) * len(xs)

    return _make(y, xs, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    y = a.data * b.data

    def bwd(g):
        ga = g * b.data if a.traced else None
        gb = g * a.data if b.traced else None
        return ga, gb

    return _make(y, (a, b), bwd)


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or ndarray (no grad through c)."""
    c = np.asarray(c, dtype=x.data.dtype) if not np.isscalar(c) else c
    y = x.data * c

    def bwd(g):
        return (g * c,)

    return _make(y, (x,), bwd)


def add_const(x: Tensor, c) -> Tensor:
    y = x.data + c

    def bwd(g):
        return (g,)

    return _make(y, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.data.shape),)

    return _make(y, (x,), bwd)


def concat_channels(parts) -> Tensor:
    y = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def bwd(g):
        grads = []
        at = 0
        for c in sizes:
            grads.append(g[:, at : at + c])
            at += c
        return tuple(grads)

    return _make(y, tuple(parts), bwd)


def mix(parts, weights: Tensor, row: int) -> Tensor:
    """Weighted sum of same-shaped tensors with weights[row] as mixing
    coefficients; gradients flow to both the parts and the weight row."""
    w_row = weights.data[row]
    y = w_row[0] * parts[0].data
    for k in range(1, len(parts)):
        y = y + w_row[k] * parts[k].data

    def bwd(g):
        grads = [g * w_row[k] if parts[k].traced else None for k in range(len(parts))]
        if weights.traced:
            gw = np.zeros_like(weights.data)
            for k in range(len(parts)):
                gw[row, k] = np.vdot(g, parts[k].data)
            grads.append(gw)
        else:
            grads.append(None)
        return tuple(grads)

    return _make(y, tuple(parts) + (weights,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch; labels are int class indices."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.data.shape[0]
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)
    probs = np.exp(logp)

    def bwd(g):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        return (gz * (g / n),)

    return _make(loss, (logits,), bwd)
