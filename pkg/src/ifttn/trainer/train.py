"""Progressive three-phase training.

Phase 1 trains the spatial stream, seeds the temporal stream from it and
trains that too. Phase 2 freezes both streams and trains the TTN (plus the
fusion weights in adaptive mode). Phase 3 tunes everything on the fused score.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..backbone import copy_backbone, init_cross_modality
from ..data_io.checkpoint import Checkpoint, load_into_model, read_checkpoint, save_checkpoint
from ..ifm import ADAPTIVE, FusionParams
from ..pipeline import IFTTN, VideoSample, build_model, consensus, fuse_scores, sample_segments, snippet_inputs
from ..tensor_core import SGD, DropoutStream, Tensor, softmax_cross_entropy
from ..ttn import ttn_from_backbone
from .config import TrainConfig

PHASES = ("phase1", "phase2", "phase3")
STREAM_GROUPS = ("spatial", "temporal")

Log = Optional[Callable[[str], None]]


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the history so far."""

    def __init__(self, message: str, history: "PhaseHistory"):
        super().__init__(message)
        self.history = history


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    lr: float
    loss: float
    accuracy: float
    steps: int


@dataclass
class PhaseHistory:
    phase: str
    epochs: List[EpochRecord] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)  # one per optimizer step
    seconds: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.losses)


@dataclass
class TrainOutcome:
    model: IFTTN
    history: List[PhaseHistory]
    checkpoint: Optional[Checkpoint] = None


# -------------------------------------------------------------------- batches
def augment_clip(rgb: np.ndarray, motion: np.ndarray, rng: np.random.Generator,
                 crop_jitter: int) -> Tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip and crop jitter, shared by every snippet of one clip.

    Flipping mirrors the x axis, so the dx channels (even indices) change sign.
    """
    if rng.random() < 0.5:
        rgb = rgb[..., ::-1]
        motion = motion[..., ::-1].copy()
        motion[:, 0::2] *= -1
    if crop_jitter > 0:
        j = crop_jitter
        dy, dx = (int(v) for v in rng.integers(0, 2 * j + 1, 2))
        h, w = rgb.shape[-2:]
        pad = ((0, 0), (0, 0), (j, j), (j, j))
        rgb = np.pad(rgb, pad, mode="edge")[..., dy:dy + h, dx:dx + w]
        motion = np.pad(motion, pad, mode="edge")[..., dy:dy + h, dx:dx + w]
    return np.ascontiguousarray(rgb), np.ascontiguousarray(motion)


def make_batch(samples: Sequence[VideoSample], idx: Sequence[int], K: int, F: int, mode: str = "eval",
               rng: Optional[np.random.Generator] = None, augment: bool = False,
               crop_jitter: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack snippet inputs: rgb (B, K, 3, H, W), motion (B, K, 2F, H, W), labels (B,)."""
    rgbs, mots, labels = [], [], []
    for i in idx:
        v = samples[i]
        sel = sample_segments(v.num_frames, K, mode, rng, F)
        rgb, mot = snippet_inputs(v, sel)
        if augment and mode == "train":
            rgb, mot = augment_clip(rgb, mot, rng, crop_jitter)
        rgbs.append(rgb)
        mots.append(mot)
        labels.append(v.label)
    return np.stack(rgbs), np.stack(mots), np.array(labels, dtype=np.int64)


def _epoch_rng(seed: int, phase: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, phase, stage, epoch]))


def _check_finite(loss: Tensor, history: PhaseHistory, where: str) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"{history.phase}: non-finite loss {value} at {where}", history)
    return value


# ---------------------------------------------------------------- generic loop
def _run_epochs(history: PhaseHistory, stage: str, stage_id: int, phase_id: int, cfg: TrainConfig,
                samples: Sequence[VideoSample], opt: SGD, base_lr: float, epochs: int,
                max_steps: Optional[int], loss_fn, log: Log) -> None:
    """Shared SGD loop. ``loss_fn(rgb, motion, labels, dropout)`` returns (loss, logits)."""
    n = len(samples)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    dropout = DropoutStream(int(np.random.SeedSequence([cfg.seed, phase_id, stage_id]).generate_state(1)[0]))
    steps = 0
    for epoch in range(epochs):
        if max_steps is not None and steps >= max_steps:
            break
        opt.lr = cfg.lr_at(base_lr, epoch, epochs)
        rng = _epoch_rng(cfg.seed, phase_id, stage_id, epoch)
        order = rng.permutation(n)
        tot_loss, correct, seen = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            rgb, mot, labels = make_batch(samples, idx, cfg.K, cfg.F, "train", rng, cfg.augment, cfg.crop_jitter)
            loss, logits = loss_fn(rgb, mot, labels, dropout.at(len(history.losses)))
            value = _check_finite(loss, history, f"{stage} epoch {epoch} step {steps}")
            loss.backward()
            opt.step()
            history.losses.append(value)
            steps += 1
            tot_loss += value * len(idx)
            correct += int((logits.data.argmax(-1) == labels).sum())
            seen += len(idx)
        rec = EpochRecord(stage, epoch, opt.lr, tot_loss / max(seen, 1), correct / max(seen, 1), steps)
        history.epochs.append(rec)
        if log:
            log(f"[{history.phase}/{stage}] epoch {epoch} lr {rec.lr:.3g} loss {rec.loss:.4f} acc {rec.accuracy:.3f}")


def _stream_loss(model: IFTTN, stream: str):
    def fn(rgb, mot, labels, dropout):
        scores = model.forward_batch(rgb, mot, "train", dropout, branches=(stream,))
        logits = consensus(getattr(scores, stream))
        return softmax_cross_entropy(logits, labels), logits
    return fn


# ---------------------------------------------------------------------- phases
def _model_for(cfg: TrainConfig, num_classes: int) -> IFTTN:
    model = build_model(cfg.model_config(num_classes), cfg.seed)
    if model.config.fusion_mode == ADAPTIVE:
        model.fusion = FusionParams.create(model.config.fused_stages, cfg.alpha_init)
    return model


def _resolve(source, cfg: TrainConfig, num_classes: int, need: str) -> IFTTN:
    """Turn a model, checkpoint or checkpoint path into a model ready for phase ``need``."""
    if isinstance(source, IFTTN):
        return source
    if source is None:
        raise MissingCheckpointError(f"{need} needs a checkpoint from the previous phase")
    ckpt = source
    if not isinstance(source, Checkpoint):
        path = Path(source)
        if not path.is_file():
            raise MissingCheckpointError(f"{need}: checkpoint {path} not found")
        ckpt = read_checkpoint(path)
    prev = PHASES[PHASES.index(need) - 1]
    if ckpt.phase not in PHASES or PHASES.index(ckpt.phase) < PHASES.index(prev):
        raise MissingCheckpointError(f"{need}: checkpoint is tagged {ckpt.phase!r}, expected {prev} or later")
    model = _model_for(cfg, num_classes)
    if ckpt.config and ckpt.model_config().num_classes != num_classes:
        raise ValueError(f"checkpoint has {ckpt.model_config().num_classes} classes, dataset has {num_classes}")
    entries = ckpt.entries
    if need == "phase2":
        # the TTN and fusion weights are rebuilt at the start of phase 2
        entries = {k: v for k, v in entries.items() if k.split(".", 1)[0] in STREAM_GROUPS}
    return load_into_model(Checkpoint(entries, ckpt.phase, ckpt.fusion_mode, ckpt.config), model)


def _save(model: IFTTN, out_path, phase: str, groups=("spatial", "temporal", "ttn", "ifm")) -> Optional[Checkpoint]:
    if out_path is None:
        return None
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(out_path, model, phase, groups)


def phase1_train_two_stream(cfg: TrainConfig, samples: Sequence[VideoSample], num_classes: int,
                            out_path=None, log: Log = None) -> TrainOutcome:
    """Train the spatial stream from scratch, then the temporal stream seeded from it."""
    t0 = time.perf_counter()
    model = _model_for(cfg, num_classes)
    hist = PhaseHistory("phase1")
    opt = SGD(model.named_parameters(("spatial",)), cfg.lr, cfg.momentum, cfg.weight_decay)
    _run_epochs(hist, "spatial", 0, 1, cfg, samples, opt, cfg.lr, cfg.epochs1, cfg.max_steps1,
                _stream_loss(model, "spatial"), log)
    model.temporal = init_cross_modality(model.spatial, 2 * cfg.F, name="temporal", dropout=cfg.dropout_temporal)
    opt = SGD(model.named_parameters(("temporal",)), cfg.lr, cfg.momentum, cfg.weight_decay)
    _run_epochs(hist, "temporal", 1, 1, cfg, samples, opt, cfg.lr, cfg.epochs1, cfg.max_steps1,
                _stream_loss(model, "temporal"), log)
    hist.seconds = time.perf_counter() - t0
    return TrainOutcome(model, [hist], _save(model, out_path, "phase1", STREAM_GROUPS))


def trainable(model: IFTTN, groups) -> Dict[str, Tensor]:
    """Parameters of ``groups``, minus fusion weights of stages the TTN never reads.

    With the default taps the top fused stage feeds nothing, so its weights
    would never receive a gradient.
    """
    taps = set(model.ttn.config.taps)
    return {k: v for k, v in model.named_parameters(groups).items()
            if not k.startswith("ifm.") or int(k.split(".")[1][len("stage"):]) in taps}


def phase2_params(model: IFTTN, freeze_alpha: bool = False) -> Dict[str, Tensor]:
    return trainable(model, ("ttn",) if freeze_alpha else ("ttn", "ifm"))


def phase2_train_ttn(cfg: TrainConfig, samples: Sequence[VideoSample], num_classes: int, source,
                     out_path=None, log: Log = None) -> TrainOutcome:
    """Train the TTN (and fusion weights) on top of frozen two-stream features."""
    t0 = time.perf_counter()
    src = _resolve(source, cfg, num_classes, "phase2")
    # streams are copied into a model built from ``cfg``, so one phase-1 result
    # can seed phase-2 runs with different fusion settings
    model = _model_for(cfg, num_classes)
    if src.config.num_classes != num_classes:
        raise ValueError(f"phase-1 model has {src.config.num_classes} classes, dataset has {num_classes}")
    model.spatial = copy_backbone(src.spatial)
    model.temporal = copy_backbone(src.temporal)
    mc = model.config
    model.ttn = ttn_from_backbone(model.spatial, mc.fused_stages[0], mc.tap_last, mc.dropout_ttn)
    if mc.fusion_mode == ADAPTIVE:
        model.fusion = FusionParams.create(mc.fused_stages, cfg.alpha_init)
    hist = PhaseHistory("phase2")
    opt = SGD(phase2_params(model, cfg.freeze_alpha), cfg.lr, cfg.momentum, cfg.weight_decay)
    mode = {"spatial": "eval", "temporal": "eval", "ttn": "train"}

    def loss_fn(rgb, mot, labels, dropout):
        scores = model.forward_batch(rgb, mot, mode, dropout, branches=("ttn",), frozen_streams=True)
        logits = consensus(scores.ttn)
        return softmax_cross_entropy(logits, labels), logits

    _run_epochs(hist, "ttn", 0, 2, cfg, samples, opt, cfg.lr, cfg.epochs2, cfg.max_steps2, loss_fn, log)
    hist.seconds = time.perf_counter() - t0
    return TrainOutcome(model, [hist], _save(model, out_path, "phase2"))


def phase3_joint_finetune(cfg: TrainConfig, samples: Sequence[VideoSample], num_classes: int, source,
                          out_path=None, log: Log = None) -> TrainOutcome:
    """Tune every parameter on cross-entropy of the fused score at a reduced learning rate."""
    t0 = time.perf_counter()
    model = _resolve(source, cfg, num_classes, "phase3")
    hist = PhaseHistory("phase3")
    groups = ("spatial", "temporal", "ttn") if cfg.freeze_alpha else ("spatial", "temporal", "ttn", "ifm")
    base_lr = cfg.lr * cfg.phase3_lr_scale
    opt = SGD(trainable(model, groups), base_lr, cfg.momentum, cfg.weight_decay)

    def loss_fn(rgb, mot, labels, dropout):
        s = model.forward_batch(rgb, mot, "train", dropout)
        logits = fuse_scores(s.spatial, s.temporal, s.ttn, cfg.weights)
        return softmax_cross_entropy(logits, labels), logits

    _run_epochs(hist, "joint", 0, 3, cfg, samples, opt, base_lr, cfg.epochs3, cfg.max_steps3, loss_fn, log)
    hist.seconds = time.perf_counter() - t0
    return TrainOutcome(model, [hist], _save(model, out_path, "phase3"))


def train_all(cfg: TrainConfig, samples: Sequence[VideoSample], num_classes: int,
              out_dir: Union[str, Path, None] = None, log: Log = None) -> TrainOutcome:
    """Run all three phases, saving ``phase{1,2,3}.ckpt`` under ``out_dir`` when given."""
    path = (lambda p: Path(out_dir) / f"{p}.ckpt") if out_dir is not None else (lambda p: None)
    r1 = phase1_train_two_stream(cfg, samples, num_classes, path("phase1"), log)
    r2 = phase2_train_ttn(cfg, samples, num_classes, r1.model, path("phase2"), log)
    r3 = phase3_joint_finetune(cfg, samples, num_classes, r2.model, path("phase3"), log)
    return TrainOutcome(r3.model, r1.history + r2.history + r3.history, r3.checkpoint)
