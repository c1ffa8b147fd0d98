"""Synthetic clips with known motion, for order- and appearance-sensitive benchmarks.

Each class follows a motion script. Reversed classes are the exact frame
reversal of their forward class, clip for clip, so a reversed pair shares its
frame multiset and differs only in order. Motion maps are computed from the
script itself (the generator knows every displacement), not estimated.

Scripts
    fade_in / fade_out        static square whose brightness ramps up / down.
                              No motion at all: only frame order separates them.
    move_down / move_up       square translating vertically (reversal pair).
    move_right / move_left    square translating horizontally (reversal pair).
    scene_stripes / scene_checker
                              static square over a textured background; solvable
                              from a single frame.

A trailing ``:N`` on a move script sets the speed in pixels per frame.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .formats import write_flo, write_mvq, write_rten
from .motion import MotionMap, degrade_flow_to_mv

REVERSED = {"fade_out": "fade_in", "move_up": "move_down", "move_left": "move_right"}
FORWARD_SCRIPTS = ("fade_in", "move_down", "move_right", "scene_stripes", "scene_checker")

PRESETS = {
    "order": ("fade_in", "fade_out"),
    "motion": ("move_down", "move_up"),
    "scene": ("scene_stripes", "scene_checker"),
    "mixed": ("fade_in", "fade_out", "move_down", "move_up", "scene_stripes", "scene_checker"),
}

SPLITS = {"train": 0, "eval": 1}


@dataclass
class SyntheticConfig:
    image_size: int = 32
    num_frames: int = 21
    classes: Tuple[str, ...] = PRESETS["mixed"]
    train_clips_per_class: int = 100
    eval_clips_per_class: int = 50
    noise: float = 0.02
    seed: int = 0
    shape_size: int = 6
    write_mvq: bool = True
    block_size: int = 16
    quant_step: float = 0.25

    def __post_init__(self):
        if isinstance(self.classes, str):
            self.classes = PRESETS.get(self.classes) or tuple(c for c in self.classes.split(",") if c)
        self.classes = tuple(self.classes)
        if len(self.classes) < 2:
            raise ValueError("a dataset needs at least two classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate classes in {self.classes}")
        for c in self.classes:
            parse_script(c)
        if self.num_frames < 2 or self.image_size < 8:
            raise ValueError("clips need >= 2 frames and images of at least 8 px")

    def to_items(self) -> Dict[str, str]:
        return {f.name: (",".join(getattr(self, f.name)) if f.name == "classes" else str(getattr(self, f.name)))
                for f in fields(self)}

    def has_reversal_pair(self) -> bool:
        names = {parse_script(c)[0] for c in self.classes}
        return any(r in names and f in names for r, f in REVERSED.items())


def parse_script(name: str) -> Tuple[str, int]:
    base, _, speed = name.partition(":")
    if base not in FORWARD_SCRIPTS and base not in REVERSED:
        raise ValueError(f"unknown motion script {name!r}")
    return base, int(speed) if speed else 1


def _forward_of(name: str) -> Tuple[str, int, bool]:
    base, speed = parse_script(name)
    if base in REVERSED:
        return REVERSED[base], speed, True
    return base, speed, False


def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    c1 = rng.uniform(0.1, 0.4, 3)
    c2 = rng.uniform(0.5, 0.8, 3)
    period = 4
    phase = int(rng.integers(0, period))
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "scene_stripes":
        sel = ((yy + phase) // (period // 2)) % 2
    else:
        sel = (((yy + phase) // (period // 2)) + ((xx + phase) // (period // 2))) % 2
    return np.where(sel[..., None] == 1, c2, c1)


def render_forward(script: str, speed: int, cfg: SyntheticConfig,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frames (N, H, W, 3), shape masks (N, H, W) and per-frame velocity (N, 2)."""
    n, size, s = cfg.num_frames, cfg.image_size, cfg.shape_size
    color = rng.uniform(0.4, 1.0, 3)
    travel = speed * (n - 1)
    if script in ("scene_stripes", "scene_checker"):
        bg = _texture(script, size, rng)
    else:
        bg = np.broadcast_to(rng.uniform(0.05, 0.25), (size, size, 3)).copy()

    if script == "move_down":
        if travel + s > size:
            raise ValueError(f"move_down at speed {speed} leaves a {size}px frame")
        x0, y0 = int(rng.integers(0, size - s + 1)), int(rng.integers(0, size - s - travel + 1))
        pos = [(x0, y0 + speed * t) for t in range(n)]
        vel = (0, speed)
    elif script == "move_right":
        if travel + s > size:
            raise ValueError(f"move_right at speed {speed} leaves a {size}px frame")
        x0, y0 = int(rng.integers(0, size - s - travel + 1)), int(rng.integers(0, size - s + 1))
        pos = [(x0 + speed * t, y0) for t in range(n)]
        vel = (speed, 0)
    else:
        x0, y0 = int(rng.integers(0, size - s + 1)), int(rng.integers(0, size - s + 1))
        pos = [(x0, y0)] * n
        vel = (0, 0)

    if script == "fade_in":
        gain = np.linspace(0.15, 1.0, n)
    else:
        gain = np.ones(n)

    frames = np.empty((n, size, size, 3))
    masks = np.zeros((n, size, size), dtype=bool)
    for t, (x, y) in enumerate(pos):
        f = bg.copy()
        f[y:y + s, x:x + s] = color * gain[t]
        frames[t] = f
        masks[t, y:y + s, x:x + s] = True
    if cfg.noise > 0:
        frames = frames + rng.normal(0.0, cfg.noise, frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    velocity = np.tile(np.array(vel, dtype=np.float64), (n, 1))
    return frames, masks, velocity


def motion_from_script(masks: np.ndarray, velocity: np.ndarray) -> np.ndarray:
    """(N, 2, H, W): each shape pixel carries the script velocity (dx, dy); background is static."""
    n, h, w = masks.shape
    out = np.zeros((n, 2, h, w), dtype=np.float32)
    for t in range(n):
        out[t, 0][masks[t]] = velocity[t, 0]
        out[t, 1][masks[t]] = velocity[t, 1]
    return out


def generate_clip(cfg: SyntheticConfig, class_name: str, split: str, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Frames (N, 3, H, W) float32 and exact motion (N, 2, H, W) for clip ``k``."""
    fwd, speed, reverse = _forward_of(class_name)
    key = [cfg.seed, zlib.crc32(f"{fwd}:{speed}".encode()), SPLITS[split], k]
    rng = np.random.default_rng(np.random.SeedSequence(key))
    frames, masks, vel = render_forward(fwd, speed, cfg, rng)
    if reverse:
        frames, masks, vel = frames[::-1], masks[::-1], -vel
    frames = np.ascontiguousarray(frames.transpose(0, 3, 1, 2), dtype=np.float32)
    return frames, motion_from_script(masks, vel)


def clip_relpath(split: str, class_name: str, k: int) -> str:
    return f"clips/{split}/{class_name.replace(':', '_s')}_{k:04d}"


def gen_synthetic(cfg: SyntheticConfig, out_dir) -> Path:
    """Write the dataset; returns the output directory."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    index: Dict[str, List[str]] = {"train": [], "eval": []}
    counts = {"train": cfg.train_clips_per_class, "eval": cfg.eval_clips_per_class}
    for split in ("train", "eval"):
        for label, name in enumerate(cfg.classes):
            for k in range(counts[split]):
                frames, motion = generate_clip(cfg, name, split, k)
                rel = clip_relpath(split, name, k)
                d = out / rel
                d.mkdir(parents=True, exist_ok=True)
                for t in range(cfg.num_frames):
                    write_rten(d / f"frame_{t:04d}.rten", frames[t])
                    dense = MotionMap.from_chw(motion[t])
                    write_flo(d / f"flow_{t:04d}.flo", dense)
                    if cfg.write_mvq:
                        write_mvq(d / f"mv_{t:04d}.mvq", degrade_flow_to_mv(dense, cfg.block_size, cfg.quant_step))
                index[split].append(f"{rel}\t{label}\t{cfg.num_frames}\n")
    (out / "train.txt").write_text("".join(index["train"]))
    (out / "eval.txt").write_text("".join(index["eval"]))
    (out / "index.txt").write_text("".join(index["train"] + index["eval"]))
    (out / "classes.txt").write_text("".join(f"{i}\t{c}\n" for i, c in enumerate(cfg.classes)))
    (out / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_items().items()))
    return out


def generate_in_memory(cfg: SyntheticConfig, split: str):
    """Same clips as :func:`gen_synthetic` without touching disk."""
    from ..pipeline import VideoSample

    counts = {"train": cfg.train_clips_per_class, "eval": cfg.eval_clips_per_class}
    samples = []
    for label, name in enumerate(cfg.classes):
        for k in range(counts[split]):
            frames, motion = generate_clip(cfg, name, split, k)
            samples.append(VideoSample(frames, motion, label, clip_relpath(split, name, k)))
    return samples
