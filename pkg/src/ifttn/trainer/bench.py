"""Inference throughput harness: flow-file ingestion vs block-MV ingestion.

One iteration reads one clip's sampled snippets from disk and runs the full
eval-mode forward. Every stage is timed separately so the breakdown adds up
to the iteration time. ``frames`` counts sampled snippets (K per clip).

Runs and paths are interleaved at iteration granularity: on a shared host the
machine speed wanders over seconds, and back-to-back runs would otherwise
measure the host rather than the code.
"""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..data_io.dataset import read_index
from ..data_io.formats import file_size, read_flo, read_mvq, read_rten
from ..ifm import fuse_pyramid
from ..pipeline import IFTTN, consensus, motion_stack_indices, sample_segments
from ..tensor_core import Tensor, getitem, no_grad, softmax_np
from ..ttn import ttn_forward

STAGES = ("io", "spatial", "temporal", "fusion", "ttn")
IO_PARTS = ("io_rgb", "io_motion")
PATHS = ("flo", "mvq")


@dataclass
class PathStats:
    path: str
    iteration_seconds: List[float] = field(default_factory=list)  # every timed iteration, all runs
    run_seconds: List[float] = field(default_factory=list)  # total per run
    stage_seconds: Dict[str, float] = field(default_factory=dict)  # summed over all timed iterations
    frames_per_video: int = 0
    runs: int = 0

    @property
    def run_fps(self) -> np.ndarray:
        per_run = len(self.iteration_seconds) // max(self.runs, 1)
        return per_run * self.frames_per_video / np.asarray(self.run_seconds)

    def summary(self) -> Dict[str, float]:
        it = np.asarray(self.iteration_seconds)
        fps = self.run_fps
        total = float(np.sum(self.run_seconds))
        out = {
            "videos_per_s": len(it) / total,
            "fps": len(it) * self.frames_per_video / total,
            "iter_ms.mean": 1e3 * float(it.mean()),
            "iter_ms.min": 1e3 * float(it.min()),
            "iter_ms.max": 1e3 * float(it.max()),
            "run_fps.mean": float(fps.mean()),
            "run_fps.std": float(fps.std()),
            "run_fps.cv": float(fps.std() / fps.mean()),
        }
        out.update({f"stage_ms.{k}": 1e3 * v / len(it) for k, v in self.stage_seconds.items()})
        return out


@dataclass
class BenchReport:
    stats: Dict[str, PathStats]
    K: int
    F: int
    warmup: int
    iters: int
    repeats: int
    bytes_per_clip: Dict[str, int] = field(default_factory=dict)
    wall_seconds: float = 0.0  # whole timed section, for cross-checking the per-iteration sums

    @property
    def timed_seconds(self) -> float:
        return float(sum(sum(s.iteration_seconds) for s in self.stats.values()))

    def items(self) -> Dict[str, str]:
        out = {"K": str(self.K), "F": str(self.F), "warmup": str(self.warmup), "iters": str(self.iters),
               "repeats": str(self.repeats)}
        for p, s in self.stats.items():
            out.update({f"{p}.{k}": repr(v) for k, v in s.summary().items()})
        out.update({f"{p}.motion_bytes_per_clip": str(v) for p, v in self.bytes_per_clip.items()})
        out["wall_seconds"] = repr(self.wall_seconds)
        out["timed_seconds"] = repr(self.timed_seconds)
        return out


def _motion_files(clip: Path, indices: Sequence[int], F: int, n: int, path: str) -> List[Path]:
    ext, stem = ("flo", "flow") if path == "flo" else ("mvq", "mv")
    return [clip / f"{stem}_{j:04d}.{ext}" for i in indices for j in motion_stack_indices(i, F, n)]


def load_snippets(clip: Path, num_frames: int, K: int, F: int, path: str,
                  clock: Dict[str, float] | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Read the eval-mode snippets of one clip: rgb (K, 3, H, W), motion (K, 2F, H, W)."""
    t0 = time.perf_counter()
    sel = sample_segments(num_frames, K, "eval", stack=F)
    rgb = np.stack([read_rten(clip / f"frame_{i:04d}.rten") for i in sel.indices])
    t1 = time.perf_counter()
    if path == "flo":
        maps = [read_flo(f).to_chw() for f in _motion_files(clip, sel.indices, F, num_frames, path)]
    else:
        maps = [read_mvq(f).to_chw() for f in _motion_files(clip, sel.indices, F, num_frames, path)]
    h, w = rgb.shape[-2:]
    motion = np.concatenate(maps, axis=0).reshape(K, 2 * F, h, w)
    if clock is not None:
        clock["io_rgb"] += t1 - t0
        clock["io_motion"] += time.perf_counter() - t1
    return rgb, motion


def timed_forward(model: IFTTN, rgb: np.ndarray, motion: np.ndarray, clock: Dict[str, float]) -> np.ndarray:
    """Eval forward of one clip with per-stage timers; returns the fused class distribution."""
    K = rgb.shape[0]
    with no_grad():
        t = time.perf_counter()
        pa, la = model.spatial.forward_pyramid(Tensor(rgb), "eval")
        t1 = time.perf_counter()
        pb, lb = model.temporal.forward_pyramid(Tensor(motion), "eval")
        t2 = time.perf_counter()
        fused = fuse_pyramid(pa, pb, model.config.fusion_mode, model.fusion, model.config.fused_stages)
        t3 = time.perf_counter()
        f_i = {s: getitem(f, slice(0, K - 1)) for s, f in fused.items()}
        f_j = {s: getitem(f, slice(1, K)) for s, f in fused.items()}
        lr = ttn_forward(model.ttn, f_i, f_j, "eval")
        logits = consensus(la.data) + consensus(lb.data) + consensus(lr.data)
        t4 = time.perf_counter()
    clock["spatial"] += t1 - t
    clock["temporal"] += t2 - t1
    clock["fusion"] += t3 - t2
    clock["ttn"] += t4 - t3
    return softmax_np(logits.astype(np.float64))


def bench(model: IFTTN, data_root, K: int = 7, warmup: int = 20, iters: int = 50, repeats: int = 5,
          split: str = "eval", paths: Sequence[str] = PATHS) -> BenchReport:
    """Time ``repeats`` runs of ``iters`` clips per ingestion path (after ``warmup`` untimed clips)."""
    if iters < 1 or repeats < 1 or warmup < 0:
        raise ValueError("iters and repeats must be >= 1, warmup >= 0")
    root = Path(data_root)
    rows = read_index(root / f"{split}.txt")
    if not rows:
        raise ValueError(f"{split} split of {root} is empty")
    F = model.config.motion_stack
    report = BenchReport({}, K, F, warmup, iters, repeats)
    for path in paths:
        if path not in PATHS:
            raise ValueError(f"unknown ingestion path {path!r}")
        rel, _, n = rows[0]
        sel = sample_segments(n, K, "eval", stack=F)
        report.bytes_per_clip[path] = sum(file_size(f) for f in _motion_files(root / rel, sel.indices, F, n, path))
        report.stats[path] = PathStats(path, stage_seconds={s: 0.0 for s in STAGES + IO_PARTS},
                                       frames_per_video=K, runs=repeats)
        scratch = {s: 0.0 for s in STAGES + IO_PARTS}
        for i in range(warmup):
            rel, _, n = rows[i % len(rows)]
            timed_forward(model, *load_snippets(root / rel, n, K, F, path), scratch)
    # Iterations of every (run, path) are interleaved round-robin so slow host
    # drift spreads evenly over runs and paths instead of landing on one of them.
    gc_was = gc.isenabled()
    gc.disable()
    per_run = {(r, p): 0.0 for r in range(repeats) for p in paths}
    wall = time.perf_counter()
    try:
        for i in range(iters):
            rel, _, n = rows[i % len(rows)]
            for r in range(repeats):
                for path in paths:
                    stats = report.stats[path]
                    t0 = time.perf_counter()
                    rgb, mot = load_snippets(root / rel, n, K, F, path, stats.stage_seconds)
                    stats.stage_seconds["io"] += time.perf_counter() - t0
                    timed_forward(model, rgb, mot, stats.stage_seconds)
                    dt = time.perf_counter() - t0
                    stats.iteration_seconds.append(dt)
                    per_run[r, path] += dt
    finally:
        if gc_was:
            gc.enable()
    report.wall_seconds = time.perf_counter() - wall
    for (r, path), secs in per_run.items():
        report.stats[path].run_seconds.append(secs)
    return report
