"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional gradient. Ops record a dynamic
graph; ``backward`` on a scalar loss walks it in reverse topological order.
Any op producing NaN/Inf aborts immediately with an error naming the op.

Gradient flow stops at tensors with ``requires_grad=False``; frozen model
parameters therefore never accumulate gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import GraphError, NonFiniteError

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph recording (inference / decoding)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), Tensor(-1.0)))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise GraphError("tensor/tensor division is not a graph op")
        return mul(self, Tensor(1.0 / scalar))

    # backward -------------------------------------------------------------
    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        The receiver must be a scalar (size-1) loss.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _make(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in output of op '{op}'")
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Element-wise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(grad, b.data.shape))

    return _make(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.data.shape))

    return _make(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise GraphError("matmul needs at least 1-D operands")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise GraphError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        ) from None

    def backward(grad):
        ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    out = np.transpose(a.data, perm)
    inverse = np.argsort(perm)

    def backward(grad):
        _accumulate(a, np.transpose(grad, inverse))

    return _make(out, (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(grad):
        _accumulate(a, grad.reshape(a.data.shape))

    return _make(out, (a,), backward, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, grad[tuple(sl)])

    return _make(out, tuple(tensors), backward, "concat")


def concat_last_dim(tensors) -> Tensor:
    return concat(tensors, axis=-1)


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def backward(grad):
        _accumulate(a, np.broadcast_to(grad, a.data.shape).copy())

    return _make(out, (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())

    def backward(grad):
        _accumulate(a, np.broadcast_to(grad / n, a.data.shape).copy())

    return _make(out, (a,), backward, "mean")


# ---------------------------------------------------------------------------
# Nonlinearities and normalization


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(grad):
        _accumulate(a, grad * (a.data > 0.0))

    return _make(out, (a,), backward, "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = x * cdf

    def backward(grad):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accumulate(a, grad * (cdf + x * pdf))

    return _make(out, (a,), backward, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to one."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(grad):
        dot = (grad * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (grad - dot))

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(grad):
        _accumulate(a, grad - soft * grad.sum(axis=-1, keepdims=True))

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise GraphError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature dim {d}"
        )
    mean = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mean) * inv
    out = gain.data * xhat + bias.data

    def backward(grad):
        lead = tuple(range(grad.ndim - 1))
        _accumulate(gain, (grad * xhat).sum(axis=lead))
        _accumulate(bias, grad.sum(axis=lead))
        gx = grad * gain.data
        gmean = gx.mean(axis=-1, keepdims=True)
        gproj = (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (gx - gmean - xhat * gproj))

    return _make(out, (a, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# Lookup, convolution, loss


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer index (also the row-gather op)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise GraphError(f"embedding table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise GraphError(
            f"index out of range for table with {table.data.shape[0]} rows"
        )
    out = table.data[ids]

    def backward(grad):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, grad)

    return _make(out, (table,), backward, "embedding_lookup")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D convolution over frames.

    x: (T, C_in); weight: (C_out, C_in, k); bias: (C_out,).
    Output: (T', C_out) with T' = 1 + (T - k) // stride.
    """
    t_in, c_in = x.data.shape
    c_out, c_in_w, k = weight.data.shape
    if c_in != c_in_w:
        raise GraphError(
            f"conv1d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}"
        )
    if t_in < k:
        raise GraphError(f"conv1d input of {t_in} frames shorter than kernel {k}")
    t_out = 1 + (t_in - k) // stride
    idx = np.arange(k)[None, :] + stride * np.arange(t_out)[:, None]
    patches = x.data[idx]  # (T', k, C_in)
    out = np.einsum("tkc,ock->to", patches, weight.data) + bias.data

    def backward(grad):
        if weight.requires_grad:
            _accumulate(weight, np.einsum("to,tkc->ock", grad, patches))
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=0))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx[j : j + (t_out - 1) * stride + 1 : stride] += grad @ weight.data[:, :, j]
            _accumulate(x, gx)

    return _make(out, (x, weight, bias), backward, "conv1d")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Masked cross-entropy, averaged over mask=1 positions only.

    logits: (N, K); targets: N integer class ids; mask: N of {0, 1} or None
    for all-ones. An all-zero mask yields a defined loss of 0 with zero
    gradient. Loss and gradients are bit-invariant to target values at
    positions where mask is 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise GraphError(f"cross_entropy logits must be 2-D, got {logits.data.shape}")
    n, k = logits.data.shape
    if targets.shape != (n,):
        raise GraphError(
            f"cross_entropy targets shape {targets.shape} does not match logits rows {n}"
        )
    if mask is None:
        mask = np.ones(n, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (n,):
            raise GraphError(
                f"cross_entropy mask shape {mask.shape} does not match targets {targets.shape}"
            )
    n_active = mask.sum()
    if n_active == 0.0:
        return _make(np.asarray(0.0), (logits,), lambda grad: None, "cross_entropy")

    active = mask > 0
    if targets[active].min() < 0 or targets[active].max() >= k:
        raise GraphError(f"cross_entropy target out of range for {k} classes")
    safe_targets = np.where(active, targets, 0)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = logp[np.arange(n), safe_targets]
    out = np.asarray(-(picked * mask).sum() / n_active)

    def backward(grad):
        soft = np.exp(logp)
        onehot = np.zeros_like(soft)
        onehot[np.arange(n), safe_targets] = 1.0
        _accumulate(logits, grad * mask[:, None] * (soft - onehot) / n_active)

    return _make(out, (logits,), backward, "cross_entropy")
