"""Differentiable operations over :class:`Tensor`.

Layouts follow the NCHW convention. Elementwise binary operations are strict:
operands must share a shape, there is no implicit broadcasting.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ------------------------------------------------------------- elementwise
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor._make(a.data + b.data, (a, b), "add", backward)


elementwise_add = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return Tensor._make(a.data - b.data, (a, b), "sub", backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * bd)
        if b.requires_grad:
            b._accumulate(g * ad)

    return Tensor._make(ad * bd, (a, b), "hadamard", backward)


def mul_const(x: Tensor, c: float) -> Tensor:
    """Multiply by a non-learnable constant."""
    c = x.data.dtype.type(c)

    def backward(g):
        x._accumulate(g * c)

    return Tensor._make(x.data * c, (x,), "mul_const", backward)


def scalar_scale(alpha: Tensor, x: Tensor) -> Tensor:
    """``alpha * x`` for a learnable scalar ``alpha``."""
    if alpha.size != 1:
        raise ShapeError(f"scalar_scale: alpha must hold one element, got shape {alpha.shape}")
    av = alpha.data.reshape(())
    xd = x.data

    def backward(g):
        if alpha.requires_grad:
            alpha._accumulate(np.asarray(np.sum(g * xd)).reshape(alpha.shape))
        if x.requires_grad:
            x._accumulate(g * av)

    return Tensor._make(av * xd, (alpha, x), "scalar_scale", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._make(x.data * mask, (x,), "relu", backward)


# ------------------------------------------------------- shape & reductions
def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        x._accumulate(np.broadcast_to(g, shape))

    return Tensor._make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", backward)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        out = np.asarray(x.data.mean(), dtype=x.dtype)

        def backward(g):
            x._accumulate(np.broadcast_to(g / n, shape))
    else:
        n = shape[axis]
        out = x.data.mean(axis=axis)

        def backward(g):
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, shape))

    return Tensor._make(out, (x,), "mean", backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def backward(g):
        x._accumulate(g.reshape(old))

    return Tensor._make(x.data.reshape(shape), (x,), "reshape", backward)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        x._accumulate(full)

    return Tensor._make(np.ascontiguousarray(x.data[idx]), (x,), "getitem", backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ValueError("stack: empty sequence")
    for t in xs[1:]:
        _check_same(xs[0], t, "stack")

    def backward(g):
        for i, t in enumerate(xs):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(np.stack([t.data for t in xs], axis=axis), tuple(xs), "stack", backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), "concat", backward)


# -------------------------------------------------------------- convolution
def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (C, kh, kw, N, ho, wo); reshapes freely to (C*kh*kw, N*ho*wo)
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (N, C, H, W); ``w``: (Co, C, kh, kw); ``b``: (Co,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {co} output channels")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(co, -1)
    out = (wmat @ cols).reshape(co, n, ho, wo)
    if b is not None:
        out += b.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(co, -1)
        if w.requires_grad:
            w._accumulate((gt @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            if pad:
                dxp = dxp[:, :, pad:pad + h, pad:pad + wd]
            x._accumulate(dxp.transpose(1, 0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, "conv2d", backward)


def max_pool(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, h, wd = x.shape
    if k > h or k > wd:
        raise ShapeError(f"max_pool: window {k} larger than input {h}x{wd}")
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    cols = _im2col(x.data, k, k, stride, ho, wo).reshape(c, k * k, n, ho, wo)
    arg = cols.argmax(axis=1)
    out = np.take_along_axis(cols, arg[:, None], axis=1)[:, 0]

    def backward(g):
        gt = g.transpose(1, 0, 2, 3)
        dx = np.zeros((c, n, h, wd), dtype=g.dtype)
        for p in range(k * k):
            i, j = divmod(p, k)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gt * (arg == p)
        x._accumulate(dx.transpose(1, 0, 2, 3))

    return Tensor._make(np.ascontiguousarray(out.transpose(1, 0, 2, 3)), (x,), "max_pool", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, wd = x.shape
    area = h * wd

    def backward(g):
        x._accumulate(np.broadcast_to((g / area)[:, :, None, None], x.shape))

    return Tensor._make(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``x``: (N, in), ``w``: (in, out), ``b``: (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} vs {w.shape[1]} outputs")
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, "linear", backward)


# ------------------------------------------------------------ normalization
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, mode: str = "train", momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In train mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} vs {c} channels")
    gd = gamma.data[None, :, None, None]
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] == 0:
            raise ValueError("batch_norm: empty batch in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def backward(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gd
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                x._accumulate((inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2))
    elif mode == "eval":
        inv = (1.0 / np.sqrt(running_var.astype(x.dtype) + x.dtype.type(eps))).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def backward(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate(g * (gd * inv[None, :, None, None]))
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    return Tensor._make(out.astype(x.dtype, copy=False), (x, gamma, beta), "batch_norm", backward)


# ------------------------------------------------------------- regularizers
def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator] = None, mode: str = "train") -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        x._accumulate(g * keep)

    return Tensor._make(x.data * keep, (x,), "dropout", backward)


# ------------------------------------------------------------------- losses
def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes: {labels.tolist()}")
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        logits._accumulate(d * (g / n))

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), "softmax_cross_entropy", backward)
