"""Evaluation, run reports, and score-file ensembling."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..data_io.checkpoint import format_items, parse_items
from ..pipeline import IFTTN, VideoSample, check_weights, consensus, predict
from ..tensor_core import softmax_np
from .train import PhaseHistory

# branch name -> score weights (spatial, temporal, ttn); "complete" uses the run's weights
BRANCH_WEIGHTS = {
    "spatial": (1.0, 0.0, 0.0),
    "temporal": (0.0, 1.0, 0.0),
    "two_stream": (1.0, 1.0, 0.0),
    "ttn": (0.0, 0.0, 1.0),
}
BRANCHES = ("spatial", "temporal", "two_stream", "ttn", "complete")


class ClassCountMismatch(ValueError):
    pass


@dataclass
class ClipScores:
    """Consensus logits of one clip for each score source."""

    id: str
    label: int
    spatial: np.ndarray
    temporal: np.ndarray
    ttn: np.ndarray
    decision: int = -1  # complete-model prediction, as returned by ``predict``

    def fused(self, weights) -> np.ndarray:
        w = check_weights(weights)
        return w[0] * self.spatial + w[1] * self.temporal + w[2] * self.ttn


@dataclass
class RunReport:
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_clips: int = 0
    class_names: List[str] = field(default_factory=list)
    accuracy: Dict[str, float] = field(default_factory=dict)
    per_class: Dict[str, Dict[str, int]] = field(default_factory=dict)  # class -> {"total", branch: correct}
    history: List[PhaseHistory] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    extra: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.accuracy.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {k}={v} outside [0, 1]")


def score_clip(model: IFTTN, video: VideoSample, K: int, weights=(1.0, 1.0, 1.0)) -> ClipScores:
    dist, bundle = predict(model, video, K, weights=weights)
    return ClipScores(video.id, int(video.label), consensus(bundle.spatial.data), consensus(bundle.temporal.data),
                      consensus(bundle.ttn.data), int(np.argmax(dist)))


def score_clips(model: IFTTN, samples: Sequence[VideoSample], K: int, weights=(1.0, 1.0, 1.0),
                threads: int = 1) -> List[ClipScores]:
    """Per-clip scores in dataset order; ``threads > 1`` spreads clips over a pool."""
    if threads <= 1:
        return [score_clip(model, v, K, weights) for v in samples]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda v: score_clip(model, v, K, weights), samples))


def accuracy_from_scores(scores: Sequence[ClipScores], weights, class_names: Sequence[str] = (),
                         num_classes: Optional[int] = None) -> RunReport:
    weights = check_weights(weights)
    labels = np.array([s.label for s in scores], dtype=np.int64)
    n_cls = num_classes or (len(class_names) if class_names else int(labels.max()) + 1)
    names = list(class_names) or [str(c) for c in range(n_cls)]
    preds = {b: np.array([int(np.argmax(s.fused(w))) for s in scores], dtype=np.int64)
             for b, w in BRANCH_WEIGHTS.items()}
    preds["complete"] = np.array([int(np.argmax(s.fused(weights))) for s in scores], dtype=np.int64)
    n = len(scores)
    acc = {b: (float((preds[b] == labels).mean()) if n else 0.0) for b in BRANCHES}
    per_class = {}
    for c, name in enumerate(names):
        mask = labels == c
        row = {"total": int(mask.sum())}
        row.update({b: int((preds[b][mask] == c).sum()) for b in BRANCHES})
        per_class[name] = row
    return RunReport(weights, n, names, acc, per_class)


def evaluate(model: IFTTN, samples: Sequence[VideoSample], K: int = 7, weights=(1.0, 1.0, 1.0),
             class_names: Sequence[str] = (), threads: int = 1) -> Tuple[RunReport, List[ClipScores]]:
    """Accuracy of every score source over ``samples`` with eval-mode sampling."""
    n_cls = model.config.num_classes
    if class_names and len(class_names) != n_cls:
        raise ClassCountMismatch(f"model predicts {n_cls} classes, dataset has {len(class_names)}")
    bad = [s.id for s in samples if not 0 <= s.label < n_cls]
    if bad:
        raise ClassCountMismatch(f"labels outside the model's {n_cls} classes (e.g. {bad[0]})")
    t0 = time.perf_counter()
    scores = score_clips(model, samples, K, weights, threads)
    report = accuracy_from_scores(scores, weights, class_names, n_cls)
    report.timings["eval_seconds"] = time.perf_counter() - t0
    return report, scores


# ---------------------------------------------------------------- score files
def write_scores(path, scores: Sequence[ClipScores]) -> None:
    """One tab-separated line per clip: id, label, then the three logit vectors."""
    lines = []
    for s in scores:
        vecs = [",".join(repr(float(x)) for x in v) for v in (s.spatial, s.temporal, s.ttn)]
        lines.append("\t".join([s.id, str(s.label)] + vecs) + "\n")
    Path(path).write_text("".join(lines))


def read_scores(path) -> List[ClipScores]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected 5 tab-separated fields")
        vecs = [np.array([float(x) for x in p.split(",")]) for p in parts[2:]]
        out.append(ClipScores(parts[0], int(parts[1]), *vecs))
    return out


def ensemble_scores(runs: Sequence[Sequence[ClipScores]]) -> List[ClipScores]:
    """Average the per-clip logits of several runs over the same clips."""
    if not runs:
        raise ValueError("nothing to ensemble")
    ids = [s.id for s in runs[0]]
    for r in runs[1:]:
        if [s.id for s in r] != ids:
            raise ValueError("score files cover different clips or orders")
    out = []
    for rows in zip(*runs):
        mean = [np.mean([getattr(r, k) for r in rows], axis=0) for k in ("spatial", "temporal", "ttn")]
        out.append(ClipScores(rows[0].id, rows[0].label, *mean))
    return out


def fused_distribution(s: ClipScores, weights) -> np.ndarray:
    return softmax_np(s.fused(weights))


# ------------------------------------------------------------------- reports
def _num(x: float) -> str:
    return repr(float(x))


def report_items(report: RunReport, include_timings: bool = False) -> Dict[str, str]:
    items: Dict[str, str] = {
        "clips": str(report.num_clips),
        "weights": ",".join(_num(w) for w in report.weights),
        "classes": ",".join(report.class_names),
    }
    items.update({f"accuracy.{b}": _num(v) for b, v in report.accuracy.items()})
    for name, row in report.per_class.items():
        items.update({f"class.{name}.{k}": str(v) for k, v in row.items()})
    for h in report.history:
        items[f"{h.phase}.steps"] = str(h.steps)
        for r in h.epochs:
            key = f"{h.phase}.{r.stage}.epoch{r.epoch}"
            items[f"{key}.lr"] = _num(r.lr)
            items[f"{key}.loss"] = _num(r.loss)
            items[f"{key}.accuracy"] = _num(r.accuracy)
        if include_timings:
            items[f"{h.phase}.seconds"] = _num(h.seconds)
    if include_timings:
        items.update({f"time.{k}": _num(v) for k, v in report.timings.items()})
    items.update(report.extra)
    return items


def format_table(report: RunReport) -> str:
    cols = BRANCHES
    head = f"{'class':<16}{'n':>6}" + "".join(f"{c:>12}" for c in cols)
    lines = [head, "-" * len(head)]
    for name, row in report.per_class.items():
        t = row["total"]
        cells = "".join(f"{(row[c] / t if t else 0.0):>12.3f}" for c in cols)
        lines.append(f"{name:<16}{t:>6}{cells}")
    lines.append("-" * len(head))
    lines.append(f"{'all':<16}{report.num_clips:>6}" + "".join(f"{report.accuracy[c]:>12.3f}" for c in cols))
    return "\n".join(lines)


def write_report(path, report: RunReport, include_timings: bool = False) -> None:
    """Human-readable table as ``#`` comment lines, then ``key = value`` lines."""
    table = "".join(f"# {line}\n" for line in format_table(report).splitlines())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(table + format_items(report_items(report, include_timings)))


def read_report(path) -> Dict[str, str]:
    return parse_items(Path(path).read_text())
