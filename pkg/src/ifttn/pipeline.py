"""End-to-end IF-TTN assembly: sampling, two-stream forward, fusion, TTN, consensus."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .backbone import Backbone, BackboneConfig, build_backbone, init_cross_modality
from .ifm import ADAPTIVE, ATTENTION, FusionParams, fuse_pyramid
from .tensor_core import (
    DropoutStream,
    ShapeError,
    Tensor,
    add,
    getitem,
    mul_const,
    no_grad,
    reshape,
    softmax_np,
)
from .ttn import TTN, TTNConfig, build_ttn, ttn_forward

Mode = Union[str, Mapping[str, str]]


# -------------------------------------------------------------------- types
@dataclass
class VideoSample:
    """One clip: ``frames`` (N, 3, H, W) in [0, 1]; ``motion`` (N, 2, H, W) displacements."""

    frames: np.ndarray
    motion: np.ndarray
    label: int
    id: str = ""

    def __post_init__(self):
        if len(self.frames) != len(self.motion):
            raise ValueError(f"{self.id}: {len(self.frames)} frames but {len(self.motion)} motion maps")
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"{self.id}: frames must be (N, 3, H, W), got {self.frames.shape}")
        if self.motion.shape[1] != 2 or self.motion.shape[2:] != self.frames.shape[2:]:
            raise ValueError(f"{self.id}: motion shape {self.motion.shape} does not match frames")

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class SnippetSelection:
    bounds: List[Tuple[int, int]]
    indices: List[int]
    stack: int = 1

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError(f"snippet indices must increase strictly: {self.indices}")
        for (lo, hi), i in zip(self.bounds, self.indices):
            if not lo <= i < hi:
                raise ValueError(f"index {i} outside its segment [{lo}, {hi})")


@dataclass
class ScoreBundle:
    """Per-segment stream logits, per-pair TTN logits, and the fused distribution."""

    spatial: Tensor
    temporal: Tensor
    ttn: Tensor
    fused: Optional[np.ndarray] = None


@dataclass
class BatchScores:
    """Scores for a batch of videos: (B, K, C), (B, K, C), (B, K-1, C)."""

    spatial: Optional[Tensor] = None
    temporal: Optional[Tensor] = None
    ttn: Optional[Tensor] = None


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 2
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    motion_stack: int = 2
    fusion_mode: str = ATTENTION
    fused_stages: Optional[Tuple[int, ...]] = None
    tap_last: bool = False
    dropout_spatial: float = 0.8
    dropout_temporal: float = 0.7
    dropout_ttn: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        L = len(self.stage_channels)
        if L < 2:
            raise ValueError("IF-TTN needs a backbone with at least two stages")
        if self.fused_stages is None:
            object.__setattr__(self, "fused_stages", (L - 1, L))
        fs = tuple(sorted(int(s) for s in self.fused_stages))
        object.__setattr__(self, "fused_stages", fs)
        if not fs or fs[0] < 1 or fs[-1] > L:
            raise ValueError(f"fused_stages {fs} outside 1..{L}")
        if fs != tuple(range(fs[0], fs[-1] + 1)) or fs[0] == L:
            raise ValueError(f"fused_stages must be a contiguous run starting below stage {L}: {fs}")
        if fs[-1] < L - 1:
            raise ValueError(f"fused_stages {fs} must reach stage {L - 1} to feed every TTN tap")
        if self.tap_last and fs[-1] != L:
            raise ValueError("tap_last requires the top stage to be fused")
        if self.fusion_mode not in (ATTENTION, ADAPTIVE):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.motion_stack < 1:
            raise ValueError("motion_stack must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def spatial_config(self) -> BackboneConfig:
        return BackboneConfig(3, self.stage_channels, self.blocks_per_stage, self.num_classes,
                              self.dropout_spatial)

    def temporal_config(self) -> BackboneConfig:
        return BackboneConfig(2 * self.motion_stack, self.stage_channels, self.blocks_per_stage,
                              self.num_classes, self.dropout_temporal)

    def ttn_config(self) -> TTNConfig:
        return TTNConfig(self.stage_channels, self.blocks_per_stage, self.num_classes,
                         self.fused_stages[0], self.tap_last, self.dropout_ttn)

    def to_items(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name in ("stage_channels", "fused_stages"):
                kw[f.name] = tuple(int(x) for x in raw.split(",") if x)
            elif f.name in ("tap_last",):
                kw[f.name] = raw.strip().lower() in ("1", "true", "yes")
            elif f.name == "fusion_mode":
                kw[f.name] = raw.strip()
            elif f.name.startswith("dropout"):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


@dataclass
class IFTTN:
    config: ModelConfig
    spatial: Backbone
    temporal: Backbone
    ttn: TTN
    fusion: FusionParams = field(default_factory=FusionParams)

    # parameter namespaces used by the optimizer and checkpoints
    def named_parameters(self, groups: Sequence[str] = ("spatial", "temporal", "ttn", "ifm")) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for g in groups:
            if g == "ifm":
                if self.config.fusion_mode == ADAPTIVE:
                    out.update({f"ifm.{k}": v for k, v in self.fusion.named_parameters().items()})
            else:
                out.update({f"{g}.{k}": v for k, v in getattr(self, g).params.items()})
        return out

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for g in ("spatial", "temporal", "ttn"):
            out.update({f"{g}.{k}": v for k, v in getattr(self, g).buffers.items()})
        return out

    def forward_batch(self, rgb, motion, mode: Mode = "eval", rng: Optional[DropoutStream] = None,
                      branches: Sequence[str] = ("spatial", "temporal", "ttn"),
                      frozen_streams: bool = False) -> BatchScores:
        return forward_batch(self, rgb, motion, mode, rng, branches, frozen_streams)


def build_model(config: ModelConfig, seed: int = 0) -> IFTTN:
    """Fresh He-initialized model; the temporal stream starts as a cross-modal copy."""
    ss = np.random.SeedSequence(seed)
    r_sp, r_ttn = (np.random.default_rng(s) for s in ss.spawn(2))
    spatial = build_backbone(config.spatial_config(), r_sp, name="spatial")
    temporal = init_cross_modality(spatial, 2 * config.motion_stack, name="temporal",
                                   dropout=config.dropout_temporal)
    ttn = build_ttn(config.ttn_config(), r_ttn)
    fusion = FusionParams.create(config.fused_stages) if config.fusion_mode == ADAPTIVE else FusionParams()
    return IFTTN(config, spatial, temporal, ttn, fusion)


# ----------------------------------------------------------------- sampling
def segment_bounds(num_frames: int, K: int) -> List[Tuple[int, int]]:
    edges = [(k * num_frames) // K for k in range(K + 1)]
    return list(zip(edges[:-1], edges[1:]))


def sample_segments(num_frames: int, K: int, mode: str = "eval",
                    rng: Optional[np.random.Generator] = None, stack: int = 1) -> SnippetSelection:
    """Split ``[0, num_frames)`` into ``K`` near-equal segments and pick one frame from each.

    Train mode draws uniformly within each segment; eval mode takes the center.
    """
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if num_frames < K:
        raise ValueError(f"cannot split {num_frames} frames into {K} segments")
    bounds = segment_bounds(num_frames, K)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        idx = [int(rng.integers(lo, hi)) for lo, hi in bounds]
    elif mode == "eval":
        idx = [(lo + hi - 1) // 2 for lo, hi in bounds]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return SnippetSelection(bounds, idx, stack)


def motion_stack_indices(index: int, stack: int, num_frames: int) -> List[int]:
    return [min(index + f, num_frames - 1) for f in range(stack)]


def snippet_inputs(video: VideoSample, sel: SnippetSelection) -> Tuple[np.ndarray, np.ndarray]:
    """RGB batch (K, 3, H, W) and motion batch (K, 2F, H, W) stacked as (dx1, dy1, ..., dxF, dyF)."""
    n = video.num_frames
    rgb = video.frames[sel.indices]
    stacks = [np.concatenate([video.motion[j] for j in motion_stack_indices(i, sel.stack, n)], axis=0)
              for i in sel.indices]
    return rgb, np.stack(stacks)


# ------------------------------------------------------------------ forward
def _mode_of(mode: Mode, part: str) -> str:
    return mode if isinstance(mode, str) else mode[part]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def forward_batch(model: IFTTN, rgb, motion, mode: Mode = "eval", rng: Optional[DropoutStream] = None,
                  branches: Sequence[str] = ("spatial", "temporal", "ttn"),
                  frozen_streams: bool = False) -> BatchScores:
    """Run the requested branches on ``rgb`` (B, K, 3, H, W) and ``motion`` (B, K, 2F, H, W).

    With ``frozen_streams`` the two backbones run without graph recording, so
    only fusion weights and TTN parameters receive gradients.
    """
    rgb, motion = _as_tensor(rgb), _as_tensor(motion)
    if rgb.ndim != 5 or motion.ndim != 5 or rgb.shape[:2] != motion.shape[:2]:
        raise ShapeError(f"expected aligned (B, K, C, H, W) batches, got {rgb.shape} and {motion.shape}")
    B, K = rgb.shape[:2]
    C = model.config.num_classes
    need_ttn = "ttn" in branches
    if need_ttn and K < 2:
        raise ValueError("the TTN branch needs K >= 2 segments")
    out = BatchScores()
    pyramids = {}
    for name, x, backbone in (("spatial", rgb, model.spatial), ("temporal", motion, model.temporal)):
        if name not in branches and not need_ttn:
            continue
        flat = reshape(x, (B * K,) + x.shape[2:])
        if frozen_streams:
            with no_grad():
                pyr, logits = backbone.forward_pyramid(flat.detach(), _mode_of(mode, name), rng)
        else:
            pyr, logits = backbone.forward_pyramid(flat, _mode_of(mode, name), rng)
        pyramids[name] = pyr
        if name in branches:
            setattr(out, name, reshape(logits, (B, K, C)))
    if need_ttn:
        fused = fuse_pyramid(pyramids["spatial"], pyramids["temporal"], model.config.fusion_mode,
                             model.fusion, model.config.fused_stages)
        f_i, f_j = {}, {}
        for s, f in fused.items():
            f5 = reshape(f, (B, K) + f.shape[1:])
            f_i[s] = reshape(getitem(f5, (slice(None), slice(0, K - 1))), (B * (K - 1),) + f.shape[1:])
            f_j[s] = reshape(getitem(f5, (slice(None), slice(1, K))), (B * (K - 1),) + f.shape[1:])
        logits = ttn_forward(model.ttn, f_i, f_j, _mode_of(mode, "ttn"), rng)
        out.ttn = reshape(logits, (B, K - 1, C))
    return out


def forward_ifttn(model: IFTTN, rgb, motion, mode: Mode = "eval",
                  rng: Optional[DropoutStream] = None) -> ScoreBundle:
    """Scores for one video given its snippet batches (K, 3, H, W) and (K, 2F, H, W)."""
    rgb, motion = _as_tensor(rgb), _as_tensor(motion)
    if rgb.shape[0] < 2:
        raise ValueError("forward_ifttn needs K >= 2 snippets")
    s = forward_batch(model, reshape(rgb, (1,) + rgb.shape), reshape(motion, (1,) + motion.shape), mode, rng)
    return ScoreBundle(s.spatial[0], s.temporal[0], s.ttn[0])


# ---------------------------------------------------------------- consensus
def consensus(rows):
    """Elementwise mean over segments (axis -2 for tensors/arrays, or a list of rows).

    Rows are summed in sorted order, so any permutation of the segments gives a
    bit-identical result.
    """
    if isinstance(rows, Tensor):
        if rows.ndim < 2 or rows.shape[-2] == 0:
            raise ValueError("consensus needs at least one row")
        k = rows.shape[-2]
        data = np.sort(rows.data, axis=-2).sum(axis=-2) / rows.dtype.type(k)
        x = rows

        def backward(g):
            x._accumulate(np.broadcast_to(np.expand_dims(g, -2) / k, x.shape))

        return Tensor._make(data.astype(rows.dtype, copy=False), (rows,), "consensus", backward)
    arr = np.stack(rows) if isinstance(rows, (list, tuple)) and rows else np.asarray(rows)
    if arr.ndim < 2 or arr.shape[-2] == 0:
        raise ValueError("consensus needs at least one row")
    return np.sort(arr, axis=-2).sum(axis=-2) / arr.shape[-2]


def check_weights(weights: Sequence[float]) -> Tuple[float, float, float]:
    w = tuple(float(x) for x in weights)
    if len(w) != 3 or any(x < 0 or not np.isfinite(x) for x in w) or sum(w) == 0:
        raise ValueError(f"fusion weights must be three non-negative numbers, not all zero: {weights}")
    return w


def fuse_scores(spatial, temporal, ttn, weights=(1.0, 1.0, 1.0)):
    """Weighted sum of the three consensus scores (pre-softmax). Works on tensors or arrays."""
    ws, wt, wr = check_weights(weights)
    cs, ct, cr = consensus(spatial), consensus(temporal), consensus(ttn)
    if isinstance(cs, Tensor):
        return add(add(mul_const(cs, ws), mul_const(ct, wt)), mul_const(cr, wr))
    return ws * cs + wt * ct + wr * cr


def predict(model: IFTTN, video: VideoSample, K: int, F: Optional[int] = None,
            weights=(1.0, 1.0, 1.0)) -> Tuple[np.ndarray, ScoreBundle]:
    """Eval-mode class distribution for one video."""
    weights = check_weights(weights)
    F = model.config.motion_stack if F is None else F
    if F != model.config.motion_stack:
        raise ValueError(f"model expects motion stacks of {model.config.motion_stack}, got {F}")
    sel = sample_segments(video.num_frames, K, "eval", stack=F)
    rgb, mot = snippet_inputs(video, sel)
    with no_grad():
        bundle = forward_ifttn(model, rgb, mot, "eval")
    logits = fuse_scores(bundle.spatial.data, bundle.temporal.data, bundle.ttn.data, weights)
    bundle.fused = softmax_np(logits.astype(np.float64))
    return bundle.fused, bundle
