"""Finite-difference gradient oracle used across the test suite.

Independent of the autodiff implementation: it only calls the forward
function and perturbs raw parameter arrays.
"""

import numpy as np

from audiocap import numerics as nm

STEP = 1e-6


def numerical_grad(f, t: nm.Tensor, step: float = STEP) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. tensor t's data."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = float(f().data)
        flat[i] = keep - step
        lo = float(f().data)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def max_rel_error(f, tensors, step: float = STEP) -> float:
    """Compare analytic grads of scalar f() against central differences.

    Returns the worst relative error over all elements of all tensors.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    nm.backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        num = numerical_grad(f, t, step)
        denom = np.maximum(np.maximum(np.abs(t.grad), np.abs(num)), 1e-6)
        worst = max(worst, float(np.max(np.abs(t.grad - num) / denom)))
    return worst
