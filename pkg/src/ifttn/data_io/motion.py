"""Motion maps: dense per-pixel flow and quantized per-block motion vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

DENSE = "dense"
BLOCK = "block"
BLOCK_SIZES = (4, 8, 16)


@dataclass
class MotionMap:
    """A 2-vector displacement field.

    ``values`` is (H, W, 2) float32 pixels for dense maps, or
    (ceil(H/bs), ceil(W/bs), 2) int16 quantization units for block maps.
    """

    width: int
    height: int
    values: np.ndarray
    kind: str = DENSE
    block_size: Optional[int] = None
    quant_step: Optional[float] = None

    def __post_init__(self):
        if self.kind == DENSE:
            self.values = np.asarray(self.values, dtype=np.float32)
            if self.values.shape != (self.height, self.width, 2):
                raise ValueError(f"dense map of {self.width}x{self.height} needs values "
                                 f"({self.height}, {self.width}, 2), got {self.values.shape}")
        elif self.kind == BLOCK:
            if self.block_size not in BLOCK_SIZES:
                raise ValueError(f"block_size must be one of {BLOCK_SIZES}, got {self.block_size}")
            if not self.quant_step or self.quant_step <= 0:
                raise ValueError(f"quant_step must be positive, got {self.quant_step}")
            hb, wb = -(-self.height // self.block_size), -(-self.width // self.block_size)
            if self.values.shape != (hb, wb, 2):
                raise ValueError(f"block map needs values ({hb}, {wb}, 2), got {self.values.shape}")
        else:
            raise ValueError(f"unknown motion map kind {self.kind!r}")

    @classmethod
    def dense(cls, values: np.ndarray) -> "MotionMap":
        values = np.asarray(values, dtype=np.float32)
        return cls(values.shape[1], values.shape[0], values, DENSE)

    @classmethod
    def from_chw(cls, chw: np.ndarray) -> "MotionMap":
        return cls.dense(np.moveaxis(np.asarray(chw), 0, -1))

    def to_chw(self) -> np.ndarray:
        """(2, H, W) float32 displacement in pixels."""
        if self.kind == BLOCK:
            return block_to_chw(self)
        return np.ascontiguousarray(np.moveaxis(self.values, -1, 0))


def degrade_flow_to_mv(dense: MotionMap, block_size: int = 16, quant_step: float = 0.25) -> MotionMap:
    """Average each block of a dense field and quantize to integer multiples of ``quant_step``.

    Edge blocks average over the pixels they actually cover.
    """
    if dense.kind != DENSE:
        raise ValueError("degrade_flow_to_mv expects a dense map")
    h, w = dense.height, dense.width
    hb, wb = -(-h // block_size), -(-w // block_size)
    v = dense.values.astype(np.float64)
    padded = np.zeros((hb * block_size, wb * block_size, 2))
    padded[:h, :w] = v
    count = np.zeros((hb * block_size, wb * block_size))
    count[:h, :w] = 1.0
    sums = padded.reshape(hb, block_size, wb, block_size, 2).sum(axis=(1, 3))
    counts = count.reshape(hb, block_size, wb, block_size).sum(axis=(1, 3))
    units = np.rint(sums / counts[..., None] / quant_step)
    if np.abs(units).max(initial=0) > np.iinfo(np.int16).max:
        raise OverflowError("block displacement exceeds the int16 range at this quant_step")
    return MotionMap(w, h, units.astype(np.int16), BLOCK, block_size, float(quant_step))


def mv_to_dense(block: MotionMap) -> MotionMap:
    """Nearest-neighbor upsampling: every pixel takes its block's displacement."""
    if block.kind != BLOCK:
        raise ValueError("mv_to_dense expects a block map")
    bs = block.block_size
    px = block.values.astype(np.float32) * np.float32(block.quant_step)
    up = np.repeat(np.repeat(px, bs, axis=0), bs, axis=1)[:block.height, :block.width]
    return MotionMap(block.width, block.height, up, DENSE)


def block_to_chw(block: MotionMap) -> np.ndarray:
    """Same values as ``mv_to_dense(block).to_chw()``, upsampled straight into (2, H, W)."""
    bs = block.block_size
    px = block.values.transpose(2, 0, 1).astype(np.float32) * np.float32(block.quant_step)
    return np.ascontiguousarray(px.repeat(bs, axis=1).repeat(bs, axis=2)[:, :block.height, :block.width])
