"""Shared test helpers: finite-difference oracle and synthetic signals."""

import numpy as np

from slmforge.tensor import Tensor, tsum


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grad_against_fd(op, arrays, grad_indices=None, rtol=1e-4, seed=0):
    """Compare analytic grads of sum(op(*tensors) * W) against central FD.

    ``arrays`` are the op's numpy inputs; ``grad_indices`` selects which of
    them to differentiate (default: all). Returns the worst relative error.
    """
    rng = np.random.default_rng(seed)
    if grad_indices is None:
        grad_indices = list(range(len(arrays)))

    tensors = [Tensor(a.copy(), requires_grad=(i in grad_indices))
               for i, a in enumerate(arrays)]
    out = op(*tensors)
    cotangent = rng.standard_normal(out.data.shape)

    loss = tsum(out * Tensor(cotangent))
    loss.backward()

    worst = 0.0
    for i in grad_indices:
        def f(x, i=i):
            fresh = [Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
            return float((op(*fresh).data * cotangent).sum())

        numeric = finite_diff_grad(f, arrays[i].copy())
        worst = max(worst, max_rel_error(tensors[i].grad, numeric))
    return worst
