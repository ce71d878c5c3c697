import numpy as np
import pytest

from pibconv.engine import Tape, set_default_dtype
from pibconv.engine.tensor import zero_grads


@pytest.fixture
def f64():
    """Run a test with float64 default parameters, restoring float32."""
    set_default_dtype("float64")
    yield
    set_default_dtype("float32")


def gradcheck(loss_fn, tensors, eps=1e-6, max_coords=None, rng=None):
    """Compare tape gradients of a scalar loss against central finite
    differences, perturbing (a sample of) each tensor's coordinates.
    Returns the worst relative error.  Tensors should be float64.
    """
    with Tape() as tape:
        loss = loss_fn()
    tensors = list(tensors)
    zero_grads(tensors)
    tape.backward(loss, leaves=tensors)
    analytic = [np.array(t.grad, dtype=np.float64, copy=True) for t in tensors]
    zero_grads(tensors)

    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            assert rng is not None, "sampled gradcheck needs an rng"
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn().data)
            flat[i] = orig - eps
            lm = float(loss_fn().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            err = abs(gflat[i] - fd) / max(1.0, abs(fd), abs(gflat[i]))
            worst = max(worst, err)
    return worst


def well_separated(rng, shape, min_gap=1e-3):
    """Values with pairwise gaps >= min_gap and none exactly zero (safe
    for FD through max-pool windows and the relu kink)."""
    n = int(np.prod(shape))
    vals = (np.arange(n, dtype=np.float64) - n / 2 + 0.37) * max(min_gap, 4.0 / n)
    return rng.permutation(vals).reshape(shape)
