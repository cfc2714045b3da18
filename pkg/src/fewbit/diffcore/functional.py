"""Differentiable ops.  Each returns a new Tensor wired into the graph."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


class ShapeError(ValueError):
    pass


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=parents if requires else ())
    if requires:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _node(x.data * c, (x,), lambda g: x._accumulate(g * c))


# when a list, relu appends its active-unit masks (used to spot kink crossings)
_kink_log: list | None = None


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask))
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: x._accumulate(g * mask))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: x._accumulate(g * (1 - y * y)))


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value``; backward passes the upstream gradient to ``x`` unchanged."""
    value = np.asarray(value, dtype=x.dtype)
    if value.shape != x.shape:
        raise ShapeError(f"straight-through value shape {value.shape} != input shape {x.shape}")
    return _node(value, (x,), lambda g: x._accumulate(g))


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {shape}") from None
    return _node(data, (x,), lambda g: x._accumulate(g.reshape(src)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,),
                 lambda g: x._accumulate(np.transpose(g, inverse)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(np.ascontiguousarray(g[tuple(index)]))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def sum_all(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype)))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _node(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: x._accumulate(np.full(x.shape, g / n, dtype=x.dtype)))


# -- layers -----------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` of shape (B, I) and ``w`` of shape (I, O)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}; expected (B, {w.shape[0] if w.ndim == 2 else '?'})")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} incompatible with weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _node(y, parents, backward)


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, NCHW layout."""
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: only 3x3 kernels are supported, got kernel shape {k.shape}")
    if x.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}; expected (B, {k.shape[1]}, H, W)")
    if b is not None and b.shape != (k.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} incompatible with kernel {k.shape}")
    B, C, H, W = x.shape
    F = k.shape[0]
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # (B, C, H, W, 3, 3) -> (B*H*W, C*9)
    cols = sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    kmat = k.data.reshape(F, C * 9)
    y = cols @ kmat.T
    if b is not None:
        y = y + b.data
    y = y.reshape(B, H, W, F).transpose(0, 3, 1, 2)
    parents = (x, k) if b is None else (x, k, b)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * H * W, F)
        if k.requires_grad:
            k._accumulate((gmat.T @ cols).reshape(k.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(B, H, W, C, 3, 3)
            dpad = np.zeros_like(padded)
            for di in range(3):
                for dj in range(3):
                    dpad[:, :, di:di + H, dj:dj + W] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            x._accumulate(dpad[:, :, 1:-1, 1:-1])

    return _node(np.ascontiguousarray(y), parents, backward)


def mean_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the trailing two axes."""
    *lead, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"mean_pool2d: spatial size {(H, W)} must be even")
    y = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * x.dtype.type(0.25)
        x._accumulate(up)

    return _node(y.astype(x.dtype), (x,), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-feature batch normalization over axis 0 of a (B, F) input.

    In training mode the running statistics are updated in place with
    ``r <- (1 - momentum) * r + momentum * batch_stat`` (biased variance).
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: input {x.shape} incompatible with {gamma.shape[0]} features")
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        y = gamma.data * xhat + beta.data

        def backward_eval(g):
            x._accumulate((g * gamma.data * inv).astype(x.dtype))
            gamma._accumulate((g * xhat).sum(axis=0).astype(gamma.dtype))
            beta._accumulate(g.sum(axis=0))

        return _node(y.astype(x.dtype), (x, gamma, beta), backward_eval)

    n = x.shape[0]
    if n < 2:
        raise ValueError(f"batchnorm in train mode needs a batch of at least 2 items, got {n}")
    mu = x.data.mean(axis=0)
    centered = x.data - mu
    var = (centered * centered).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = gamma.data * xhat + beta.data
    running_mean *= 1 - momentum
    running_mean += momentum * mu
    running_var *= 1 - momentum
    running_var += momentum * var

    def backward(g):
        gamma._accumulate((g * xhat).sum(axis=0))
        beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gamma.data
            gx = inv * (gx_hat - gx_hat.mean(axis=0) - xhat * (gx_hat * xhat).mean(axis=0))
            x._accumulate(gx)

    return _node(y, (x, gamma, beta), backward)


# -- losses -----------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (B, C), got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({B},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be integers")
    if B and (labels.min() < 0 or labels.max() >= C):
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise ValueError(f"softmax_cross_entropy: label {int(bad)} outside [0, {C})")
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        logits._accumulate((grad * (g / B)).astype(logits.dtype))

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = diff * (2 * g / n)
        a._accumulate(d.astype(a.dtype))
        b._accumulate((-d).astype(b.dtype))

    return _node(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), backward)
