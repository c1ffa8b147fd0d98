"""Temporal transformation network over adjacent snippet pairs.

For a pair ``(i, i+1)`` the network starts from the difference of the fused
features at the first tap stage and runs it through truncated copies of the
upper backbone stages. Between stages, a merge step adds the next stage's
feature difference to the running output::

    r_in = (f_j - f_i) + r_out

The final stage feeds a pooled linear head. Pair logits are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .backbone import (
    Backbone,
    BackboneConfig,
    Buffers,
    Params,
    head_forward,
    init_head,
    init_stage,
    stage_forward,
)
from .tensor_core import DropoutStream, ShapeError, Tensor, add, get_default_dtype, mean, stack, sub


@dataclass(frozen=True)
class TTNConfig:
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    num_classes: int = 2
    first_tap: int = 2
    tap_last: bool = False
    dropout: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not 1 <= self.first_tap < len(self.stage_channels):
            raise ValueError(f"first_tap must lie in [1, {len(self.stage_channels) - 1}], got {self.first_tap}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def stages(self) -> List[int]:
        """Backbone stages the TTN re-implements."""
        return list(range(self.first_tap + 1, self.num_stages + 1))

    @property
    def taps(self) -> List[int]:
        """Stages whose fused-feature differences enter the TTN."""
        last = self.num_stages if self.tap_last else self.num_stages - 1
        return list(range(self.first_tap, last + 1))

    @classmethod
    def from_backbone(cls, cfg: BackboneConfig, first_tap: int = 2, tap_last: bool = False,
                      dropout: float = 0.8) -> "TTNConfig":
        return cls(cfg.stage_channels, cfg.blocks_per_stage, cfg.num_classes, first_tap, tap_last, dropout)


@dataclass
class TTN:
    config: TTNConfig
    params: Params = field(default_factory=dict)
    buffers: Buffers = field(default_factory=dict)
    name: str = "ttn"


def build_ttn(config: TTNConfig, rng) -> TTN:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dtype = get_default_dtype()
    params: Params = {}
    buffers: Buffers = {}
    for s in config.stages:
        init_stage(params, buffers, s, config.stage_channels[s - 2], config.stage_channels[s - 1],
                   config.blocks_per_stage, rng, dtype)
    init_head(params, rng, config.stage_channels[-1], config.num_classes, dtype)
    return TTN(config, params, buffers)


def ttn_from_backbone(backbone: Backbone, first_tap: int = 2, tap_last: bool = False,
                      dropout: float = 0.8) -> TTN:
    """Copy the backbone stages above ``first_tap`` and its head into a new TTN."""
    cfg = TTNConfig.from_backbone(backbone.config, first_tap, tap_last, dropout)
    prefixes = tuple(f"stage{s}." for s in cfg.stages) + ("head.",)
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in backbone.params.items()
              if k.startswith(prefixes)}
    buffers = {k: v.copy() for k, v in backbone.buffers.items() if k.startswith(prefixes)}
    return TTN(cfg, params, buffers)


def ttm_merge(f_i: Tensor, f_j: Tensor, r_out: Optional[Tensor]) -> Tensor:
    """Ordered merge ``(f_j - f_i) + r_out``; ``r_out=None`` means a zero residual."""
    if f_i.shape != f_j.shape:
        raise ShapeError(f"ttm_merge: f_i {f_i.shape} vs f_j {f_j.shape}")
    diff = sub(f_j, f_i)
    if r_out is None:
        return diff
    if r_out.shape != diff.shape:
        raise ShapeError(f"ttm_merge: residual {r_out.shape} vs features {diff.shape}")
    return add(diff, r_out)


def ttn_forward(ttn: TTN, f_i: Mapping[int, Tensor], f_j: Mapping[int, Tensor], mode: str = "eval",
                rng: Optional[DropoutStream] = None) -> Tensor:
    """Logits for a batch of ordered pairs (``f_i`` earlier, ``f_j`` later)."""
    cfg = ttn.config
    for s in cfg.taps:
        if s not in f_i or s not in f_j:
            raise KeyError(f"ttn: tap stage {s} missing from pair pyramids")
    r: Optional[Tensor] = None
    for s in cfg.taps:
        if s == cfg.num_stages:
            break
        r = ttm_merge(f_i[s], f_j[s], r)
        r = stage_forward(ttn.params, ttn.buffers, s + 1, cfg.blocks_per_stage, r, mode)
    if cfg.tap_last:
        top = cfg.num_stages
        r = ttm_merge(f_i[top], f_j[top], r)
    gen = rng.generator(f"{ttn.name}.head") if (rng is not None and mode == "train") else None
    return head_forward(ttn.params, r, cfg.dropout, mode, gen)


def adjacent_pairs(num_segments: int) -> List[Tuple[int, int]]:
    """``[(0, 1), (1, 2), ..., (K-2, K-1)]`` (0-based)."""
    if num_segments < 2:
        raise ValueError("need at least two segments to form a pair")
    return [(i, i + 1) for i in range(num_segments - 1)]


def aggregate_pairs(pair_logits: Sequence[Tensor]) -> Tensor:
    """Mean of the per-pair logits."""
    if not pair_logits:
        raise ValueError("aggregate_pairs: no pairs")
    if len(pair_logits) == 1:
        return pair_logits[0]
    return mean(stack(list(pair_logits), 0), 0)
