"""Reverse-mode autodiff over numpy buffers.

A Tensor is a thin wrapper around an ndarray plus an optional gradient.
Ops (see engine.ops) run eagerly and, when a Tape is active and at least
one input is traced, append a record (output, inputs, backward_fn) to
it.  Records are appended in execution order, so walking them in reverse
is a valid reverse-topological traversal; no sorting pass is needed.

Gradient buffers are treated as immutable: accumulation rebinds
``t.grad = t.grad + g`` instead of mutating in place.  Backward
functions may therefore return the incoming gradient itself (or a view)
for pass-through ops without risk of aliasing bugs, and must never write
to the gradient they receive.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the dtype new parameters and op constants use (float32/float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


class Tensor:
    """Array plus gradient slot.  ``traced`` marks leaves that want grads."""

    __slots__ = ("data", "grad", "traced")

    def __init__(self, data, traced: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.traced = traced

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data, traced=False)

    def __repr__(self):
        flag = ", traced" if self.traced else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


_STACK: list = []


def active_tape():
    """Innermost active Tape, or None when recording is off."""
    return _STACK[-1] if _STACK else None


class Tape:
    """Ordered record of traced ops; context manager activates it."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[tuple] = []

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> None:
        self.records.append((out, inputs, bwd))

    def backward(self, loss: Tensor, seed=None, leaves=None) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every traced leaf.

        Grads already present are added to, so zero (set to None) between
        steps.  ``seed`` overrides the default all-ones gradient and is
        required when the root is not scalar.  ``leaves``, when given,
        get zero grads if the traversal never reached them.
        """
        if seed is None:
            if loss.data.size != 1:
                raise ValueError("backward of a non-scalar requires an explicit seed")
            seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for out, inputs, bwd in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            grads = bwd(g)
            for t, gt in zip(inputs, grads):
                if gt is None or not t.traced:
                    continue
                t.grad = gt if t.grad is None else t.grad + gt
        if leaves is not None:
            for t in leaves:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
