"""Information fusion of appearance and motion feature pyramids.

Two fusion rules are provided: attention fusion, ``a + a*b``, where motion
features act as a residual attention map on appearance features, and adaptive
fusion, ``w1*a + w2*b + w3*(a*b)``, with three learnable scalars per stage.
With weights ``(1, 0, 1)`` adaptive fusion reproduces attention fusion
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np

from .tensor_core import ShapeError, Tensor, add, get_default_dtype, hadamard, scalar_scale

ATTENTION = "attention"
ADAPTIVE = "adaptive"
FUSION_MODES = (ATTENTION, ADAPTIVE)

# Ablation presets expressed as adaptive weights.
PRESETS = {
    "attention": (1.0, 0.0, 1.0),
    "additive": (1.0, 1.0, 0.0),
    "multiplicative": (0.0, 0.0, 1.0),
}


@dataclass
class FusionParams:
    """One learnable ``(alpha1, alpha2, alpha3)`` triple per fused stage."""

    alphas: Dict[int, Tuple[Tensor, Tensor, Tensor]] = field(default_factory=dict)

    @classmethod
    def create(cls, stages: Iterable[int], init=(1.0, 0.0, 1.0), dtype=None) -> "FusionParams":
        dtype = dtype or get_default_dtype()
        return cls({int(s): tuple(Tensor(np.array(v, dtype=dtype), requires_grad=True) for v in init)
                    for s in stages})

    def named_parameters(self) -> Dict[str, Tensor]:
        return {f"stage{s}.alpha{i + 1}": t for s, trip in sorted(self.alphas.items())
                for i, t in enumerate(trip)}

    def values(self, stage: int) -> Tuple[float, float, float]:
        return tuple(float(t.data.reshape(-1)[0]) for t in self.alphas[stage])


def fuse_attention(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"fuse_attention: shape mismatch {a.shape} vs {b.shape}")
    return add(a, hadamard(a, b))


def fuse_adaptive(a: Tensor, b: Tensor, alphas: Tuple[Tensor, Tensor, Tensor]) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"fuse_adaptive: shape mismatch {a.shape} vs {b.shape}")
    a1, a2, a3 = alphas
    # (a1*a + a2*b) + a3*(a*b): with (1, 0, 1) each step is exact and the sum
    # order matches fuse_attention.
    return add(add(scalar_scale(a1, a), scalar_scale(a2, b)), scalar_scale(a3, hadamard(a, b)))


def fuse_pyramid(A: Mapping[int, Tensor], B: Mapping[int, Tensor], mode: str,
                 params: FusionParams | None, fused_stages: Iterable[int]) -> Dict[int, Tensor]:
    """Fuse the listed stages; other stages are dropped from the result."""
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    out: Dict[int, Tensor] = {}
    for s in sorted(fused_stages):
        if s not in A or s not in B:
            raise KeyError(f"stage {s} missing from {'spatial' if s not in A else 'temporal'} pyramid")
        if A[s].shape != B[s].shape:
            raise ShapeError(f"stage {s}: spatial {A[s].shape} vs temporal {B[s].shape}")
        if mode == ATTENTION:
            out[s] = fuse_attention(A[s], B[s])
        else:
            if params is None or s not in params.alphas:
                raise KeyError(f"no fusion weights for stage {s}")
            out[s] = fuse_adaptive(A[s], B[s], params.alphas[s])
    return out
