"""Reading datasets written by :func:`gen_synthetic` (or any tree in the same layout)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from ..pipeline import VideoSample
from .formats import read_flo, read_mvq, read_rten
from .motion import MotionMap, degrade_flow_to_mv, mv_to_dense

FLOW = "flow"
MV = "mv"


@dataclass
class Dataset:
    samples: List[VideoSample]
    class_names: List[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(max(s.label for s in self.samples)) + 1

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> VideoSample:
        return self.samples[i]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def read_index(path) -> List[Tuple[str, int, int]]:
    """Parse ``relative_path<TAB>label<TAB>num_frames`` lines."""
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
        rows.append((parts[0], int(parts[1]), int(parts[2])))
    return rows


def read_classes(root) -> List[str]:
    p = Path(root) / "classes.txt"
    if not p.exists():
        return []
    return [line.split("\t", 1)[1] for line in p.read_text().splitlines() if line.strip()]


def load_motion_map(clip_dir: Path, t: int, kind: str = FLOW, block_size: int = 16,
                    quant_step: float = 0.25) -> np.ndarray:
    """(2, H, W) dense displacement for frame ``t`` from flow or block-MV files."""
    if kind == FLOW:
        return read_flo(clip_dir / f"flow_{t:04d}.flo").to_chw()
    if kind != MV:
        raise ValueError(f"unknown motion kind {kind!r}")
    mvq = clip_dir / f"mv_{t:04d}.mvq"
    if mvq.exists():
        m = read_mvq(mvq)
        if m.block_size == block_size and np.float32(m.quant_step) == np.float32(quant_step):
            return mv_to_dense(m).to_chw()
    return mv_to_dense(degrade_flow_to_mv(read_flo(clip_dir / f"flow_{t:04d}.flo"),
                                          block_size, quant_step)).to_chw()


def load_clip(root, rel: str, label: int, num_frames: int, motion: str = FLOW,
              block_size: int = 16, quant_step: float = 0.25) -> VideoSample:
    d = Path(root) / rel
    if not d.is_dir():
        raise FileNotFoundError(f"clip directory {d} not found")
    frames = np.stack([read_rten(d / f"frame_{t:04d}.rten") for t in range(num_frames)])
    maps = np.stack([load_motion_map(d, t, motion, block_size, quant_step) for t in range(num_frames)])
    return VideoSample(frames, maps, label, rel)


def load_split(root, split: str = "train", motion: str = FLOW, block_size: int = 16,
               quant_step: float = 0.25, limit: int | None = None) -> Dataset:
    root = Path(root)
    index = root / f"{split}.txt"
    if not index.exists():
        raise FileNotFoundError(f"no index file {index}")
    rows = read_index(index)
    if limit is not None:
        rows = rows[:limit]
    samples = [load_clip(root, rel, label, n, motion, block_size, quant_step) for rel, label, n in rows]
    return Dataset(samples, read_classes(root))


def degrade_samples(samples: Sequence[VideoSample], block_size: int = 16,
                    quant_step: float = 0.25) -> List[VideoSample]:
    """Replace each clip's dense motion with upsampled block motion vectors."""
    out = []
    for s in samples:
        maps = np.stack([mv_to_dense(degrade_flow_to_mv(MotionMap.from_chw(m), block_size, quant_step)).to_chw()
                         for m in s.motion])
        out.append(VideoSample(s.frames, maps, s.label, s.id))
    return out
