"""Training configuration and the ``key = value`` config-file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from ..data_io.checkpoint import format_items, parse_items
from ..pipeline import ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    # sampling
    K: int = 7
    F: int = 2
    # optimization
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_step: Optional[int] = None  # epochs between decays; None means 2/3 of the phase
    epochs1: int = 30
    epochs2: int = 50
    epochs3: int = 20
    max_steps1: Optional[int] = None
    max_steps2: Optional[int] = None
    max_steps3: Optional[int] = None
    phase3_lr_scale: float = 0.1
    # architecture
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    dropout_spatial: float = 0.8
    dropout_temporal: float = 0.7
    dropout_ttn: float = 0.8
    fusion_mode: str = "attention"
    fused_stages: Optional[Tuple[int, ...]] = None
    tap_last: bool = False
    freeze_alpha: bool = False
    alpha_init: Tuple[float, float, float] = (1.0, 0.0, 1.0)
    # data
    motion: str = "flow"
    block_size: int = 16
    quant_step: float = 0.25
    augment: bool = True
    crop_jitter: int = 2
    # inference
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.lr <= 0 or self.batch_size <= 0 or self.F < 1:
            raise ValueError("lr, batch_size and F must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.motion not in ("flow", "mv"):
            raise ValueError(f"motion must be 'flow' or 'mv', got {self.motion!r}")

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(num_classes, self.stage_channels, self.blocks_per_stage, self.F,
                           self.fusion_mode, self.fused_stages, self.tap_last,
                           self.dropout_spatial, self.dropout_temporal, self.dropout_ttn)

    def lr_at(self, base: float, epoch: int, phase_epochs: int) -> float:
        step = self.lr_step or max(1, (2 * phase_epochs) // 3)
        return base * self.lr_decay ** (epoch // step)

    def to_items(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    def with_items(self, items: Mapping[str, Any]) -> "TrainConfig":
        """Return a copy with string (or typed) overrides applied."""
        known = {f.name: f for f in fields(self)}
        kw = {}
        for key, raw in items.items():
            key = key.replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, raw, getattr(self, key))
        return replace(self, **kw)


_OPTIONAL_INT = {"lr_step", "max_steps1", "max_steps2", "max_steps3"}
_INT_TUPLES = {"stage_channels", "fused_stages"}
_FLOAT_TUPLES = {"weights", "alpha_init"}


def _coerce(key: str, raw, current):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    raw = raw.strip()
    if key in _OPTIONAL_INT:
        return None if raw.lower() in ("", "none") else int(raw)
    if key in _INT_TUPLES:
        return None if raw.lower() in ("", "none") else tuple(int(x) for x in raw.split(",") if x.strip())
    if key in _FLOAT_TUPLES:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def read_config_file(path) -> Dict[str, str]:
    return parse_items(Path(path).read_text())


def write_config_file(path, cfg: TrainConfig) -> None:
    Path(path).write_text(format_items(cfg.to_items()))
