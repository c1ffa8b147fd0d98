"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], target: Tensor,
                   eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn(*inputs)`` with respect to ``target``."""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*inputs).item()
            flat[i] = orig - eps
            fm = fn(*inputs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite value while perturbing element {i}")
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if g_ad.size else 0.0


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               wrt: Sequence[Tensor] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` must return a scalar tensor. Gradients are compared for every tensor
    in ``wrt`` (default: the ``inputs`` that require grad). Use double precision.
    """
    targets = list(wrt) if wrt is not None else [t for t in inputs if t.requires_grad]
    for t in targets:
        t.grad = None
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite loss in grad_check")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]
    worst = 0.0
    for t, g_ad in zip(targets, analytic):
        g_fd = numerical_grad(fn, inputs, t, eps)
        worst = max(worst, relative_error(g_ad, g_fd))
    return worst
