"""Command-line entry point: ``ifttn <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..data_io.checkpoint import format_items, load_checkpoint
from ..data_io.dataset import load_clip, load_split, read_classes
from ..data_io.formats import read_flo, read_mvq, write_flo, write_mvq
from ..data_io.motion import BLOCK, degrade_flow_to_mv, mv_to_dense
from ..data_io.synthetic import SyntheticConfig, gen_synthetic
from ..pipeline import build_model, predict
from .ablate import FUSIONS, MOTIONS, ablate
from .bench import bench
from .config import TrainConfig, read_config_file
from .evaluate import (
    RunReport,
    accuracy_from_scores,
    ensemble_scores,
    evaluate,
    format_table,
    read_scores,
    write_report,
    write_scores,
)
from .train import (
    TrainingDiverged,
    phase1_train_two_stream,
    phase2_train_ttn,
    phase3_joint_finetune,
)

log = logging.getLogger("ifttn")

# flags that map one-to-one onto TrainConfig fields
CONFIG_FLAGS = {
    "K": int, "F": int, "batch_size": int, "lr": float, "momentum": float, "weight_decay": float,
    "epochs1": int, "epochs2": int, "epochs3": int, "max_steps1": int, "max_steps2": int, "max_steps3": int,
    "fusion_mode": str, "fused_stages": str, "stage_channels": str, "blocks_per_stage": int,
    "motion": str, "weights": str, "threads": int,
}


class CliError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="'key = value' file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for name, typ in CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def _train_config(args) -> TrainConfig:
    items: Dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file {path} not found")
        items.update(read_config_file(path))
    for name in CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            items[name] = str(v)
    for kv in getattr(args, "set", []):
        if "=" not in kv:
            raise CliError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    if args.seed is not None:
        items["seed"] = str(args.seed)
    return TrainConfig().with_items(items)


def _class_names(root: Path) -> List[str]:
    names = read_classes(root)
    if not names:
        raise CliError(f"{root}/classes.txt is missing or empty")
    return names


def _maybe_report(path, report: RunReport, timings: bool) -> None:
    print(format_table(report))
    if path:
        write_report(path, report, timings)


# -------------------------------------------------------------- subcommands
def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(image_size=args.size, num_frames=args.frames, classes=args.classes,
                          train_clips_per_class=args.train_clips, eval_clips_per_class=args.eval_clips,
                          noise=args.noise, seed=args.seed or 0, write_mvq=not args.no_mvq,
                          block_size=args.block_size, quant_step=args.quant_step)
    out = gen_synthetic(cfg, args.out)
    print(f"wrote {len(cfg.classes)} classes x ({cfg.train_clips_per_class} train + "
          f"{cfg.eval_clips_per_class} eval) clips to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    root, out = Path(args.data), Path(args.out)
    names = _class_names(root)
    train = load_split(root, "train", cfg.motion, cfg.block_size, cfg.quant_step, args.limit).samples
    phases = [1, 2, 3] if args.phase == "all" else [int(args.phase)]
    source = args.checkpoint
    history, model = [], None
    try:
        for ph in phases:
            path = out / f"phase{ph}.ckpt"
            if ph == 1:
                res = phase1_train_two_stream(cfg, train, len(names), path, log.info)
            else:
                src = model if model is not None else (source or out / f"phase{ph - 1}.ckpt")
                fn = phase2_train_ttn if ph == 2 else phase3_joint_finetune
                res = fn(cfg, train, len(names), src, path, log.info)
            model = res.model
            history += res.history
            log.info(f"saved {path}")
    except TrainingDiverged as exc:
        rep = RunReport(cfg.weights, 0, names, {}, {}, history + [exc.history], extra={"status": "diverged"})
        if args.report:
            write_report(args.report, rep, args.timings)
        raise CliError(str(exc)) from exc
    if args.no_eval:
        rep = RunReport(cfg.weights, 0, names, history=history)
    else:
        evals = load_split(root, "eval", cfg.motion, cfg.block_size, cfg.quant_step, args.limit).samples
        rep, _ = evaluate(model, evals, cfg.K, cfg.weights, names, cfg.threads)
        rep.history = history
        print(format_table(rep))
    rep.extra["status"] = "ok"
    rep.extra.update({f"config.{k}": v for k, v in cfg.to_items().items()})
    if args.report:
        write_report(args.report, rep, args.timings)
    return 0


def cmd_eval(args) -> int:
    cfg = _train_config(args)
    weights = cfg.weights
    if args.ensemble:
        runs = [read_scores(p) for p in args.ensemble]
        names = _class_names(Path(args.data)) if args.data else []
        rep = accuracy_from_scores(ensemble_scores(runs), weights, names)
        _maybe_report(args.report, rep, False)
        return 0
    if not args.checkpoint or not args.data:
        raise CliError("eval needs --checkpoint and --data (or --ensemble score files)")
    root = Path(args.data)
    names = _class_names(root)
    model = load_checkpoint(_existing(args.checkpoint))
    samples = load_split(root, args.split, cfg.motion, cfg.block_size, cfg.quant_step, args.limit).samples
    rep, scores = evaluate(model, samples, cfg.K, weights, names, cfg.threads)
    if args.scores_out:
        write_scores(args.scores_out, scores)
    _maybe_report(args.report, rep, args.timings)
    return 0


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{p} not found")
    return p


def cmd_predict(args) -> int:
    cfg = _train_config(args)
    model = load_checkpoint(_existing(args.checkpoint))
    clip = Path(args.clip)
    if not clip.is_dir():
        raise CliError(f"clip directory {clip} not found")
    n = len(list(clip.glob("frame_*.rten")))
    video = load_clip(clip.parent, clip.name, 0, n, cfg.motion, cfg.block_size, cfg.quant_step)
    dist, _ = predict(model, video, cfg.K, weights=cfg.weights)
    names = read_classes(args.data) if args.data else []
    names = names or [str(c) for c in range(len(dist))]
    items = {f"prob.{name}": repr(float(p)) for name, p in zip(names, dist)}
    items["prediction"] = names[int(np.argmax(dist))]
    sys.stdout.write(format_items(items))
    if args.report:
        Path(args.report).write_text(format_items(items))
    return 0


def cmd_bench(args) -> int:
    cfg = _train_config(args)
    root = Path(args.data)
    if args.checkpoint:
        model = load_checkpoint(_existing(args.checkpoint))
    else:
        model = build_model(cfg.model_config(len(_class_names(root))), cfg.seed)
    rep = bench(model, root, cfg.K, args.warmup, args.iters, args.repeats, args.split)
    items = rep.items()
    sys.stdout.write(format_items(items))
    if args.report:
        Path(args.report).write_text(format_items(items))
    return 0


def cmd_convert_flow(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    kinds = (src.suffix.lower(), dst.suffix.lower())
    if kinds == (".flo", ".mvq"):
        write_mvq(dst, degrade_flow_to_mv(read_flo(src), args.block_size, args.quant_step))
    elif kinds == (".mvq", ".flo"):
        m = read_mvq(src)
        write_flo(dst, mv_to_dense(m) if m.kind == BLOCK else m)
    else:
        raise CliError(f"convert-flow handles .flo -> .mvq and .mvq -> .flo, not {kinds[0]} -> {kinds[1]}")
    print(f"{src} -> {dst}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    root = Path(args.data)
    names = _class_names(root)
    train = load_split(root, "train", "flow", limit=args.limit).samples
    evals = load_split(root, "eval", "flow", limit=args.limit).samples
    fusions = tuple(args.fusions.split(","))
    motions = tuple(args.motions.split(","))
    res = ablate(cfg, train, evals, len(names), names, fusions, motions, log.info)
    print(res.table())
    if args.report:
        Path(args.report).write_text("".join(f"# {l}\n" for l in res.table().splitlines())
                                     + format_items(res.items()))
    return 0


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ifttn", description="Two-stream video classifier with a temporal "
                                 "transformation branch, trained in three phases.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--report", help="write a 'key = value' report here")
        if config:
            _add_config_flags(p)

    g = sub.add_parser("gen-data", help="write a synthetic clip dataset")
    common(g, config=False)
    g.add_argument("--out", required=True)
    g.add_argument("--classes", default="mixed", help="preset (order, motion, scene, mixed) or comma list")
    g.add_argument("--train-clips", type=int, default=100)
    g.add_argument("--eval-clips", type=int, default=50)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--frames", type=int, default=21)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--block-size", type=int, default=16)
    g.add_argument("--quant-step", type=float, default=0.25)
    g.add_argument("--no-mvq", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training phases")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--phase", choices=("1", "2", "3", "all"), default="all")
    t.add_argument("--checkpoint", help="input checkpoint for phase 2/3 (default: OUT/phase{N-1}.ckpt)")
    t.add_argument("--limit", type=int, default=None, help="use only the first N clips of each split")
    t.add_argument("--no-eval", action="store_true")
    t.add_argument("--timings", action="store_true", help="include wall-clock timings in the report")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-branch accuracy on a split")
    common(e)
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="eval")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--scores-out", help="write per-clip consensus scores")
    e.add_argument("--ensemble", nargs="+", help="average these score files instead of running a model")
    e.add_argument("--timings", action="store_true")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="class distribution for one clip directory")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--data", help="dataset root, for class names")
    p.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="throughput of flow vs block-MV ingestion")
    common(b)
    b.add_argument("--data", required=True)
    b.add_argument("--checkpoint")
    b.add_argument("--split", default="eval")
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--iters", type=int, default=50)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("convert-flow", help=".flo -> .mvq (degrade) or .mvq -> .flo (upsample)")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--block-size", type=int, default=16)
    c.add_argument("--quant-step", type=float, default=0.25)
    c.set_defaults(func=cmd_convert_flow)

    a = sub.add_parser("ablate", help="fusion variant x motion source grid")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--fusions", default=",".join(FUSIONS))
    a.add_argument("--motions", default=",".join(MOTIONS))
    a.add_argument("--limit", type=int, default=None)
    a.set_defaults(func=cmd_ablate)
    return ap


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a one-line diagnostic
        if args.verbose:
            log.exception("traceback")
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ifttn {args.command}: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
