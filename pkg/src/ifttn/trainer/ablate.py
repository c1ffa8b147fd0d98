"""Ablation grid: fusion variant x motion source, with per-branch accuracies.

Fusion variants
    separate   two TTNs, one fed spatial features only and one fed temporal
               features only (frozen adaptive weights (1,0,0) and (0,1,0));
               their scores are averaged.
    attention  ``a + a*b`` fusion.
    adaptive   learned ``a1*a + a2*b + a3*a*b`` fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Sequence

from ..data_io.dataset import degrade_samples
from ..ifm import ADAPTIVE
from ..pipeline import VideoSample
from .config import TrainConfig
from .evaluate import BRANCHES, RunReport, accuracy_from_scores, ensemble_scores, evaluate
from .train import Log, phase1_train_two_stream, phase2_train_ttn, phase3_joint_finetune

FUSIONS = ("separate", "attention", "adaptive")
MOTIONS = ("flow", "mv")
SEPARATE_PRESETS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))


@dataclass
class AblationResult:
    reports: Dict[str, RunReport] = field(default_factory=dict)  # "<motion>.<fusion>" -> report

    def items(self) -> Dict[str, str]:
        out = {}
        for cell, rep in self.reports.items():
            out.update({f"{cell}.accuracy.{b}": repr(v) for b, v in rep.accuracy.items()})
        return out

    def table(self) -> str:
        head = f"{'cell':<20}" + "".join(f"{b:>12}" for b in BRANCHES)
        rows = [head, "-" * len(head)]
        for cell, rep in self.reports.items():
            rows.append(f"{cell:<20}" + "".join(f"{rep.accuracy[b]:>12.3f}" for b in BRANCHES))
        return "\n".join(rows)


def _phases_2_3(cfg, train, num_classes, phase1_model, log):
    r2 = phase2_train_ttn(cfg, train, num_classes, phase1_model, log=log)
    r3 = phase3_joint_finetune(cfg, train, num_classes, r2.model, log=log)
    return r3.model, r2.history + r3.history


def ablate(cfg: TrainConfig, train: Sequence[VideoSample], evals: Sequence[VideoSample], num_classes: int,
           class_names: Sequence[str] = (), fusions: Sequence[str] = FUSIONS,
           motions: Sequence[str] = MOTIONS, log: Log = None) -> AblationResult:
    """Train and evaluate every (motion, fusion) cell. ``train``/``evals`` carry dense flow."""
    for f in fusions:
        if f not in FUSIONS:
            raise ValueError(f"unknown fusion variant {f!r}")
    for m in motions:
        if m not in MOTIONS:
            raise ValueError(f"unknown motion source {m!r}")
    result = AblationResult()
    for motion in motions:
        if motion == "mv":
            tr, ev = (degrade_samples(s, cfg.block_size, cfg.quant_step) for s in (train, evals))
        else:
            tr, ev = list(train), list(evals)
        base = replace(cfg, motion=motion)
        p1 = phase1_train_two_stream(base, tr, num_classes, log=log)
        for fusion in fusions:
            if fusion == "separate":
                runs, history = [], list(p1.history)
                for preset in SEPARATE_PRESETS:
                    c = replace(base, fusion_mode=ADAPTIVE, freeze_alpha=True, alpha_init=preset)
                    model, hist = _phases_2_3(c, tr, num_classes, p1.model, log)
                    runs.append(evaluate(model, ev, c.K, c.weights, class_names, c.threads)[1])
                    history += hist
                report = accuracy_from_scores(ensemble_scores(runs), base.weights, class_names, num_classes)
                report.history = history
            else:
                c = replace(base, fusion_mode=fusion)
                model, hist = _phases_2_3(c, tr, num_classes, p1.model, log)
                report = evaluate(model, ev, c.K, c.weights, class_names, c.threads)[0]
                report.history = p1.history + hist
            result.reports[f"{motion}.{fusion}"] = report
            if log:
                log(f"[ablate] {motion}.{fusion}: " +
                    " ".join(f"{b}={report.accuracy[b]:.3f}" for b in BRANCHES))
    return result

