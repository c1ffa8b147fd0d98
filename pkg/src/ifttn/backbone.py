"""Small residual backbone that exposes every stage's output.

The network is a stride-1 3x3 stem followed by ``L`` stages of residual
blocks; stage 1 keeps the stem resolution and every later stage halves it.
Parameter names are flat and stage-qualified (``stage2.block0.conv1.w``) so
that a truncated copy of the upper stages (the TTN) shares names and shapes
with its source.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .tensor_core import (
    DropoutStream,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    conv2d,
    dropout,
    get_default_dtype,
    global_avg_pool,
    linear,
    relu,
)

Params = Dict[str, Tensor]
Buffers = Dict[str, np.ndarray]
FeaturePyramid = Dict[int, Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    num_classes: int = 2
    dropout: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not self.stage_channels:
            raise ValueError("stage_channels must be nonempty")
        if self.in_channels < 1 or self.blocks_per_stage < 1 or self.num_classes < 1:
            raise ValueError(f"invalid backbone config {self}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def stage_in_channels(self, stage: int) -> int:
        return self.stage_channels[0] if stage == 1 else self.stage_channels[stage - 2]


# ------------------------------------------------------------------- layers
def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


def _init_conv(params: Params, name: str, rng, cin: int, cout: int, k: int, dtype) -> None:
    params[f"{name}.w"] = _he(rng, (cout, cin, k, k), cin * k * k, dtype)


def _init_bn(params: Params, buffers: Buffers, name: str, c: int, dtype) -> None:
    params[f"{name}.gamma"] = Tensor(np.ones(c, dtype), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(c, dtype), requires_grad=True)
    buffers[f"{name}.running_mean"] = np.zeros(c, dtype)
    buffers[f"{name}.running_var"] = np.ones(c, dtype)


def _bn(params: Params, buffers: Buffers, name: str, x: Tensor, mode: str) -> Tensor:
    return batch_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"],
                      buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"], mode)


def init_stage(params: Params, buffers: Buffers, stage: int, cin: int, cout: int, blocks: int,
               rng: np.random.Generator, dtype=None) -> None:
    """Add parameters for residual stage ``stage`` (stride 2 unless it is stage 1)."""
    dtype = dtype or get_default_dtype()
    stride = 1 if stage == 1 else 2
    for b in range(blocks):
        p = f"stage{stage}.block{b}"
        bin_ = cin if b == 0 else cout
        _init_conv(params, f"{p}.conv1", rng, bin_, cout, 3, dtype)
        _init_bn(params, buffers, f"{p}.bn1", cout, dtype)
        _init_conv(params, f"{p}.conv2", rng, cout, cout, 3, dtype)
        _init_bn(params, buffers, f"{p}.bn2", cout, dtype)
        if b == 0 and (stride != 1 or bin_ != cout):
            _init_conv(params, f"{p}.shortcut", rng, bin_, cout, 1, dtype)
            _init_bn(params, buffers, f"{p}.shortcut_bn", cout, dtype)


def residual_block(params: Params, buffers: Buffers, name: str, x: Tensor, stride: int,
                   mode: str) -> Tensor:
    h = relu(_bn(params, buffers, f"{name}.bn1", conv2d(x, params[f"{name}.conv1.w"], None, stride, 1), mode))
    h = _bn(params, buffers, f"{name}.bn2", conv2d(h, params[f"{name}.conv2.w"], None, 1, 1), mode)
    if f"{name}.shortcut.w" in params:
        sc = _bn(params, buffers, f"{name}.shortcut_bn",
                 conv2d(x, params[f"{name}.shortcut.w"], None, stride, 0), mode)
    else:
        sc = x
    return relu(add(h, sc))


def stage_forward(params: Params, buffers: Buffers, stage: int, blocks: int, x: Tensor,
                  mode: str) -> Tensor:
    for b in range(blocks):
        stride = 2 if (b == 0 and stage > 1) else 1
        x = residual_block(params, buffers, f"stage{stage}.block{b}", x, stride, mode)
    return x


def init_head(params: Params, rng: np.random.Generator, cin: int, num_classes: int, dtype=None) -> None:
    dtype = dtype or get_default_dtype()
    w = rng.standard_normal((cin, num_classes)) * np.sqrt(1.0 / cin)
    params["head.fc.w"] = Tensor(w.astype(dtype), requires_grad=True)
    params["head.fc.b"] = Tensor(np.zeros(num_classes, dtype), requires_grad=True)


def head_forward(params: Params, x: Tensor, p: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Global average pool, dropout, linear."""
    h = dropout(global_avg_pool(x), p, rng, mode)
    return linear(h, params["head.fc.w"], params["head.fc.b"])


# ----------------------------------------------------------------- backbone
@dataclass
class Backbone:
    config: BackboneConfig
    params: Params = field(default_factory=dict)
    buffers: Buffers = field(default_factory=dict)
    name: str = "backbone"

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward_pyramid(self, x: Tensor, mode: str = "eval",
                        rng: Optional[DropoutStream] = None) -> Tuple[FeaturePyramid, Tensor]:
        """Return ``({stage: features}, logits)`` for an NCHW batch."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"{self.name}: expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        min_extent = 2 ** (cfg.num_stages - 1)
        if min(x.shape[2:]) < min_extent:
            raise ShapeError(f"{self.name}: spatial extent {x.shape[2:]} too small for "
                             f"{cfg.num_stages} stages (need >= {min_extent})")
        p, buf = self.params, self.buffers
        h = relu(_bn(p, buf, "stem.bn", conv2d(x, p["stem.conv.w"], None, 1, 1), mode))
        pyramid: FeaturePyramid = {}
        for stage in range(1, cfg.num_stages + 1):
            h = stage_forward(p, buf, stage, cfg.blocks_per_stage, h, mode)
            pyramid[stage] = h
        gen = rng.generator(f"{self.name}.head") if (rng is not None and mode == "train") else None
        logits = head_forward(p, h, cfg.dropout, mode, gen)
        return pyramid, logits

    def __call__(self, x, mode="eval", rng=None):
        return self.forward_pyramid(x, mode, rng)


def build_backbone(config: BackboneConfig, rng, name: str = "backbone") -> Backbone:
    """He-initialized parameters for ``config``; ``rng`` is a seed or a Generator."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dtype = get_default_dtype()
    params: Params = {}
    buffers: Buffers = {}
    c0 = config.stage_channels[0]
    _init_conv(params, "stem.conv", rng, config.in_channels, c0, 3, dtype)
    _init_bn(params, buffers, "stem.bn", c0, dtype)
    for stage in range(1, config.num_stages + 1):
        init_stage(params, buffers, stage, config.stage_in_channels(stage),
                   config.stage_channels[stage - 1], config.blocks_per_stage, rng, dtype)
    init_head(params, rng, config.stage_channels[-1], config.num_classes, dtype)
    return Backbone(config, params, buffers, name)


def forward_pyramid(backbone: Backbone, x: Tensor, mode: str = "eval",
                    rng: Optional[DropoutStream] = None) -> Tuple[FeaturePyramid, Tensor]:
    return backbone.forward_pyramid(x, mode, rng)


def copy_backbone(src: Backbone, name: Optional[str] = None, **config_changes) -> Backbone:
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in src.params.items()}
    buffers = {k: v.copy() for k, v in src.buffers.items()}
    cfg = replace(src.config, **config_changes) if config_changes else src.config
    return Backbone(cfg, params, buffers, name or src.name)


def cross_modality_stem(stem: np.ndarray, target_in_channels: int) -> np.ndarray:
    """Channel-mean of an RGB stem kernel, replicated and rescaled by ``3 / target``."""
    in_ch = stem.shape[1]
    mean = stem.mean(axis=1, keepdims=True)
    scale = stem.dtype.type(in_ch / target_in_channels)
    return np.repeat(mean, target_in_channels, axis=1) * scale


def init_cross_modality(spatial: Backbone, target_in_channels: int, name: str = "temporal",
                        dropout: Optional[float] = None) -> Backbone:
    """Seed a backbone for ``target_in_channels`` inputs from a trained RGB backbone.

    All layers are copied verbatim except the stem convolution, whose kernels
    are averaged over the input channels and spread across the new channels.
    """
    if target_in_channels < 1:
        raise ValueError("target_in_channels must be >= 1")
    changes = {"in_channels": target_in_channels}
    if dropout is not None:
        changes["dropout"] = dropout
    out = copy_backbone(spatial, name, **changes)
    out.params["stem.conv.w"] = Tensor(cross_modality_stem(spatial.params["stem.conv.w"].data,
                                                           target_in_channels), requires_grad=True)
    return out
