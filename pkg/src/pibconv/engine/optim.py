"""Optimizers operating directly on Tensor .data/.grad buffers.

State objects hold per-parameter moment buffers keyed by position in the
parameter list, so callers must pass the same list (same order) to every
step.  Weight decay is coupled, i.e. folded into the gradient before the
momentum/moment updates.
"""

from __future__ import annotations

import math

import numpy as np


class SGDState:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.bufs: dict[int, np.ndarray] = {}


def sgd_step(params, state: SGDState, lr: float) -> None:
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.momentum:
            buf = state.bufs.get(i)
            if buf is None:
                buf = state.bufs[i] = np.array(g, dtype=p.data.dtype, copy=True)
            else:
                buf *= state.momentum
                buf += g
            g = buf
        p.data -= lr * g


class AdamState:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}


def adam_step(params, state: AdamState, lr: float) -> None:
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.  Grads are rebound, not mutated, keeping
    the engine's no-in-place-gradient contract.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.vdot(p.grad, p.grad).real)
    total = math.sqrt(total)
    coef = max_norm / (total + 1e-6)
    if coef < 1.0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * coef
    return total


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at t=0 to lr_min at t=total."""
    if total <= 0:
        raise ValueError("total epochs must be positive")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))
