"""Acceptance suite. Each test carries a ``criterion`` marker and prints one PASS/FAIL line in the summary.

The training benchmarks are slow (several minutes on one core); they share
module-scoped fixtures so each dataset is trained once.
"""
import filecmp
import time
from dataclasses import replace

import numpy as np
import pytest

from ifttn.data_io.checkpoint import encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from ifttn.data_io.formats import read_flo, read_mvq, read_rten, write_flo, write_mvq, write_rten
from ifttn.data_io.motion import BLOCK, MotionMap, degrade_flow_to_mv
from ifttn.data_io.synthetic import SyntheticConfig, gen_synthetic, generate_in_memory
from ifttn.ifm import fuse_adaptive, fuse_attention
from ifttn.pipeline import (
    ModelConfig,
    build_model,
    consensus,
    forward_batch,
    fuse_scores,
)
from ifttn.tensor_core import (
    Tensor,
    add,
    batch_norm,
    concat,
    conv2d,
    dropout,
    getitem,
    global_avg_pool,
    grad_check,
    hadamard,
    linear,
    max_pool,
    mean,
    mul_const,
    precision,
    relu,
    reshape,
    scalar_scale,
    softmax_cross_entropy,
    stack,
    sub,
    sum_all,
)
from ifttn.trainer.ablate import ablate
from ifttn.trainer.bench import bench
from ifttn.trainer.cli import cli_main
from ifttn.trainer.config import TrainConfig
from ifttn.trainer.evaluate import evaluate
from ifttn.trainer.train import phase1_train_two_stream, train_all
from ifttn.ttn import adjacent_pairs, ttm_merge

from conftest import param, weighted_sum
from test_data_io import block_mean_oracle

criterion = pytest.mark.criterion

# desk-scale network shared by the training benchmarks
SMALL = TrainConfig(stage_channels=(8, 16, 32), blocks_per_stage=1, batch_size=16,
                    dropout_spatial=0.5, dropout_temporal=0.5, dropout_ttn=0.5)


def _note(request, text):
    request.node.user_properties.append(("detail", text))


# ------------------------------------------------------------ 1: gradients
def _op_cases(rng):
    """(name, fn, inputs, reduction_free) for every differentiable primitive and composite."""
    a, b = param(rng, 2, 3, 4), param(rng, 2, 3, 4)
    w = rng.normal(size=(2, 3, 4))
    alpha = param(rng, 1)
    img = param(rng, 2, 3, 5, 5)
    kern, bias = param(rng, 4, 3, 3, 3, scale=0.5), param(rng, 4)
    ties_free = Tensor(rng.permutation(48).reshape(1, 3, 4, 4) / 10.0, requires_grad=True)
    bn_x, gam, bet = param(rng, 3, 2, 4, 4), param(rng, 2), param(rng, 2)
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
    xl, wl, bl = param(rng, 4, 5), param(rng, 5, 3), param(rng, 3)
    logits, labels = param(rng, 4, 3), np.array([0, 2, 1, 2])
    rows = param(rng, 2, 5, 3)
    al = tuple(param(rng, 1) for _ in range(3))
    seed = int(rng.integers(1 << 30))

    def probe(shape, salt):
        return np.random.default_rng(salt).normal(size=shape)

    return [
        ("add", lambda a, b: weighted_sum(add(a, b), w), [a, b], True),
        ("sub", lambda a, b: weighted_sum(sub(a, b), w), [a, b], True),
        ("hadamard", lambda a, b: weighted_sum(hadamard(a, b), w), [a, b], True),
        ("mul_const", lambda a: weighted_sum(mul_const(a, -1.5), w), [a], True),
        ("relu", lambda a: weighted_sum(relu(a), w), [a], True),
        ("reshape", lambda a: weighted_sum(reshape(a, (4, 6)), w.reshape(4, 6)), [a], True),
        ("getitem", lambda a: weighted_sum(getitem(a, (slice(None), slice(1, 3))), w[:, 1:3]), [a], True),
        ("stack", lambda a, b: weighted_sum(stack([a, b], 1), np.stack([w, -w], 1)), [a, b], True),
        ("concat", lambda a, b: weighted_sum(concat([a, b], 2), np.concatenate([w, 2 * w], 2)), [a, b], True),
        ("dropout", lambda a: weighted_sum(dropout(a, 0.3, np.random.default_rng(seed)), w), [a], True),
        ("max_pool", lambda x: weighted_sum(max_pool(x, 2), probe((1, 3, 2, 2), 1)), [ties_free], True),
        ("scalar_scale", lambda s, x: weighted_sum(scalar_scale(s, x), w), [alpha, a], False),
        ("sum_all", lambda a: sum_all(hadamard(a, a)), [a], False),
        ("mean", lambda a: weighted_sum(mean(a, 1), w[:, 0]), [a], False),
        ("global_avg_pool", lambda x: weighted_sum(global_avg_pool(x), probe((2, 3), 2)), [img], False),
        ("linear", lambda x, w_, b_: weighted_sum(linear(x, w_, b_), probe((4, 3), 3)), [xl, wl, bl], False),
        ("conv2d", lambda x, k, c: weighted_sum(conv2d(x, k, c, stride=2, pad=1), probe((2, 4, 3, 3), 4)),
         [img, kern, bias], False),
        ("batch_norm.train", lambda x, g, c: weighted_sum(batch_norm(x, g, c, rm.copy(), rv.copy(), "train"),
                                                          probe((3, 2, 4, 4), 5)), [bn_x, gam, bet], False),
        ("batch_norm.eval", lambda x, g, c: weighted_sum(batch_norm(x, g, c, rm.copy(), rv.copy(), "eval"),
                                                         probe((3, 2, 4, 4), 6)), [bn_x, gam, bet], False),
        ("softmax_cross_entropy", lambda z: softmax_cross_entropy(z, labels), [logits], False),
        ("fuse_attention", lambda a, b: weighted_sum(fuse_attention(a, b), w), [a, b], True),
        ("fuse_adaptive", lambda a, b, x, y, z: weighted_sum(fuse_adaptive(a, b, (x, y, z)), w),
         [a, b, *al], False),
        ("ttm_merge", lambda a, b, c: weighted_sum(ttm_merge(a, b, c), w), [a, b, param(rng, 2, 3, 4)], True),
        ("consensus", lambda r: softmax_cross_entropy(consensus(r), [1, 2]), [rows], False),
    ]


def _micro_loss(model, labels):
    def loss(rgb, mot):
        s = forward_batch(model, rgb, mot, "train")
        return softmax_cross_entropy(fuse_scores(s.spatial, s.temporal, s.ttn), labels)
    return loss


@criterion(1, "gradient oracle suite")
def test_gradient_oracle_suite(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = {True: 0.0, False: 0.0}
    failures = []
    with precision("double"):
        for name, fn, inputs, free in _op_cases(rng):
            err = grad_check(fn, inputs)
            worst[free] = max(worst[free], err)
            if err >= (1e-6 if free else 1e-4):
                failures.append(f"{name}={err:.2e}")

        # full micro model: every parameter, both inputs, train-mode batch norm, no dropout.
        # Own generator: central differences are only valid away from ReLU kinks, and
        # this draw keeps every pre-activation clear of them.
        rng = np.random.default_rng(11)
        model = build_model(ModelConfig(num_classes=2, stage_channels=(3, 4, 4), blocks_per_stage=1,
                                        motion_stack=1, fusion_mode="adaptive", dropout_spatial=0.0,
                                        dropout_temporal=0.0, dropout_ttn=0.0), 3)
        rgb = Tensor(rng.uniform(size=(2, 2, 3, 8, 8)), requires_grad=True)
        mot = Tensor(rng.normal(size=(2, 2, 2, 8, 8)), requires_grad=True)
        params = list(model.named_parameters().values())
        micro = grad_check(_micro_loss(model, np.array([0, 1])), [rgb, mot], wrt=[rgb, mot] + params)
    secs = time.perf_counter() - t0
    _note(request, f"reduction-free max {worst[True]:.1e}, others max {worst[False]:.1e}, "
                   f"micro IF-TTN {micro:.1e} over {sum(p.size for p in params)} weights, {secs:.0f}s")
    assert not failures, failures
    assert micro < 1e-4
    assert secs < 120


# ----------------------------------------------------------- 2: identities
@criterion(2, "algebraic identities")
def test_algebraic_identities(request):
    rng = np.random.default_rng(5)
    one, zero = Tensor([1.0]), Tensor([0.0])
    for _ in range(50):
        shape = tuple(int(s) for s in rng.integers(1, 6, 4))
        a = Tensor((rng.normal(size=shape) * 10.0 ** rng.integers(-3, 4)).astype(np.float32))
        b = Tensor((rng.normal(size=shape) * 10.0 ** rng.integers(-3, 4)).astype(np.float32))
        # value equality: a zero product may come out as -0.0 on one side only
        assert np.array_equal(fuse_adaptive(a, b, (one, zero, one)).data, fuse_attention(a, b).data)
        r = Tensor(rng.normal(size=shape).astype(np.float32))
        assert np.array_equal(ttm_merge(a, b, None).data, -ttm_merge(b, a, None).data)
        assert ttm_merge(a, a, r).data.tobytes() == r.data.tobytes()
        k = int(rng.integers(1, 10))
        rows = rng.normal(0, 100, (k, 7)).astype(np.float32)
        assert consensus(rows).tobytes() == consensus(rows[rng.permutation(k)]).tobytes()

    model = build_model(ModelConfig(num_classes=3, stage_channels=(4, 6, 8), blocks_per_stage=1), 0)
    for K in range(2, 10):
        assert len(adjacent_pairs(K)) == K - 1
        s = forward_batch(model, rng.uniform(size=(1, K, 3, 8, 8)), rng.normal(size=(1, K, 4, 8, 8)))
        assert s.ttn.shape == (1, K - 1, 3)
    _note(request, "50 random draws each, K=2..9")


# ---------------------------------------------------- 3: temporal order
ORDER_CFG = replace(SMALL, lr=0.01, epochs1=4, epochs2=15, epochs3=3)


@criterion(3, "temporal-order benchmark")
def test_temporal_order_benchmark(request):
    t0 = time.perf_counter()
    sc = SyntheticConfig(classes="order", train_clips_per_class=100, eval_clips_per_class=50)
    assert sc.image_size == 32 and sc.num_frames == 21 and ORDER_CFG.K == 7
    model = train_all(ORDER_CFG, generate_in_memory(sc, "train"), 2).model
    report, _ = evaluate(model, generate_in_memory(sc, "eval"), ORDER_CFG.K, class_names=sc.classes)
    acc, secs = report.accuracy, time.perf_counter() - t0
    _note(request, f"two-stream {acc['two_stream']:.3f}, ttn {acc['ttn']:.3f}, complete {acc['complete']:.3f}, "
                   f"{ORDER_CFG.epochs2} phase-2 epochs, {secs:.0f}s")
    assert acc["two_stream"] <= 0.60
    assert acc["complete"] >= 0.90 and acc["ttn"] >= 0.90
    assert ORDER_CFG.epochs2 <= 50 and secs < 15 * 60


# ------------------------------------------- 4, 5: mixed set, flow vs mv
MIXED_CFG = replace(SMALL, lr=0.05, epochs1=6, epochs2=30, epochs3=3)


@pytest.fixture(scope="module")
def mixed_ablation():
    sc = SyntheticConfig(classes="mixed", train_clips_per_class=40, eval_clips_per_class=30)
    tr, ev, n = generate_in_memory(sc, "train"), generate_in_memory(sc, "eval"), len(sc.classes)
    flow = ablate(MIXED_CFG, tr, ev, n, sc.classes, fusions=("separate", "attention"), motions=("flow",))
    mv = ablate(MIXED_CFG, tr, ev, n, sc.classes, fusions=("attention",), motions=("mv",))
    return {cell: rep.accuracy for res in (flow, mv) for cell, rep in res.reports.items()}


@criterion(4, "ablation direction on the mixed set")
def test_ablation_direction(request, mixed_ablation):
    acc = mixed_ablation["flow.attention"]
    best_single = max(acc["spatial"], acc["temporal"])
    _note(request, f"spatial {acc['spatial']:.3f}, temporal {acc['temporal']:.3f}, "
                   f"two-stream {acc['two_stream']:.3f}, complete {acc['complete']:.3f}")
    assert acc["complete"] - acc["two_stream"] >= -0.02
    assert acc["two_stream"] - best_single >= -0.02
    # joint tuning must not lose what either branch had on its own
    assert acc["complete"] >= max(acc["two_stream"], acc["ttn"]) - 0.02


def test_fused_features_beat_separate_streams(mixed_ablation):
    # same noise tolerance as the other direction checks: both sit near the ceiling here
    fused, separate = mixed_ablation["flow.attention"], mixed_ablation["flow.separate"]
    assert fused["complete"] - separate["complete"] >= -0.02


@criterion(5, "motion-quality robustness")
def test_motion_quality_robustness(request, mixed_ablation):
    flow, mv = mixed_ablation["flow.attention"], mixed_ablation["mv.attention"]
    drop = {b: flow[b] - mv[b] for b in ("temporal", "complete")}
    _note(request, f"complete {flow['complete']:.3f} -> {mv['complete']:.3f}, "
                   f"temporal {flow['temporal']:.3f} -> {mv['temporal']:.3f}")
    assert drop["complete"] <= 0.05
    assert drop["temporal"] > drop["complete"]


# ------------------------------------------------------------ 6: overfit
@criterion(6, "overfit sanity")
def test_overfit_eight_clips(request):
    sc = SyntheticConfig(classes=("move_down", "scene_stripes"), train_clips_per_class=4, eval_clips_per_class=0)
    clips = generate_in_memory(sc, "train")
    assert len(clips) == 8
    cfg = replace(SMALL, batch_size=8, lr=0.01, epochs1=100, max_steps1=200)
    r = phase1_train_two_stream(cfg, clips, 2)
    steps = max(e.steps for e in r.history[0].epochs)
    report, _ = evaluate(r.model, clips, cfg.K)
    acc = report.accuracy
    _note(request, f"train acc spatial {acc['spatial']:.3f}, temporal {acc['temporal']:.3f}, "
                   f"two-stream {acc['two_stream']:.3f} after {steps} steps per stream")
    assert steps <= 200
    assert acc["spatial"] == acc["temporal"] == acc["two_stream"] == 1.0


# -------------------------------------------------------- 7: round-trips
@criterion(7, "format and checkpoint round-trips")
def test_round_trips_and_degrade_oracle(request, tmp_path):
    rng = np.random.default_rng(8)
    for i in range(20):
        h, w = (int(x) for x in rng.integers(1, 30, 2))
        flo = MotionMap.dense(rng.normal(0, 5, (h, w, 2)).astype(np.float32))
        write_flo(tmp_path / "f.flo", flo)
        assert read_flo(tmp_path / "f.flo").values.tobytes() == flo.values.tobytes()
        mv = MotionMap(w * 4, h * 4, rng.integers(-900, 900, (h, w, 2)).astype(np.int16), BLOCK, 4, 0.25)
        write_mvq(tmp_path / "m.mvq", mv)
        back = read_mvq(tmp_path / "m.mvq")
        assert back.values.tobytes() == mv.values.tobytes() and back.block_size == 4
        arr = rng.normal(size=tuple(int(s) for s in rng.integers(1, 5, i % 4))).astype(np.float32)
        write_rten(tmp_path / "t.rten", arr)
        got = read_rten(tmp_path / "t.rten")
        assert got.shape == arr.shape and got.tobytes() == arr.tobytes()

    model = build_model(ModelConfig(num_classes=3, stage_channels=(4, 6, 8), blocks_per_stage=1,
                                    fusion_mode="adaptive"), 2)
    save_checkpoint(tmp_path / "m.ckpt", model, "phase3")
    restored = load_checkpoint(tmp_path / "m.ckpt")
    for k, p in model.named_parameters().items():
        assert restored.named_parameters()[k].data.tobytes() == p.data.tobytes()
    for k, b in model.named_buffers().items():
        assert restored.named_buffers()[k].tobytes() == b.tobytes()
    assert encode_checkpoint(read_checkpoint(tmp_path / "m.ckpt")) == (tmp_path / "m.ckpt").read_bytes()

    for _ in range(100):
        h, w = (int(x) for x in rng.integers(5, 40, 2))
        bs = int(rng.choice([4, 8, 16]))
        field = rng.normal(0, 4, (h, w, 2)).astype(np.float32)
        assert np.array_equal(degrade_flow_to_mv(MotionMap.dense(field), bs, 0.25).values,
                              block_mean_oracle(field, bs, 0.25))
    _note(request, "20 draws per format, 100 oracle fields")


# -------------------------------------------------------------- 8: bench
@criterion(8, "bench harness")
def test_bench_stability_and_io(request, tmp_path):
    sc = SyntheticConfig(classes="mixed", train_clips_per_class=0, eval_clips_per_class=2)
    root = gen_synthetic(sc, tmp_path / "ds")
    model = build_model(SMALL.model_config(len(sc.classes)), 0)
    rep = bench(model, root, K=7, warmup=20, iters=50, repeats=5)
    flo, mvq = rep.stats["flo"].summary(), rep.stats["mvq"].summary()
    _note(request, f"fps flo {flo['fps']:.1f} mvq {mvq['fps']:.1f}, cv flo {flo['run_fps.cv']:.3f} "
                   f"mvq {mvq['run_fps.cv']:.3f}, io ms flo {flo['stage_ms.io']:.2f} mvq {mvq['stage_ms.io']:.2f}")
    for s in (flo, mvq):
        assert s["run_fps.cv"] < 0.10
        assert all(f"stage_ms.{k}" in s for k in ("io", "spatial", "temporal", "fusion", "ttn"))
    assert len(rep.stats["flo"].run_seconds) == 5
    assert mvq["stage_ms.io"] <= flo["stage_ms.io"]


# -------------------------------------------------------- 9: determinism
@criterion(9, "byte-identical CLI reports")
def test_cli_reports_are_byte_identical(request, tmp_path):
    gen = ["--classes", "fade_in,fade_out,move_down", "--train-clips", "4", "--eval-clips", "2",
           "--size", "16", "--frames", "8", "--seed", "4"]
    train = ["--K", "3", "--F", "2", "--batch-size", "4", "--lr", "0.01", "--epochs1", "2", "--epochs2", "2",
             "--epochs3", "1", "--stage-channels", "4,6,8", "--blocks-per-stage", "1", "--seed", "9"]
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli_main(["gen-data", "--out", str(d / "ds")] + gen) == 0
        assert cli_main(["train", "--data", str(d / "ds"), "--out", str(d / "ck"),
                         "--report", str(d / "train.txt")] + train) == 0
        assert cli_main(["eval", "--data", str(d / "ds"), "--checkpoint", str(d / "ck" / "phase3.ckpt"),
                         "--K", "3", "--F", "2", "--motion", "mv", "--report", str(d / "eval.txt"),
                         "--scores-out", str(d / "scores.tsv")]) == 0
        outputs.append(d)
    a, b = outputs
    for name in ("train.txt", "eval.txt", "scores.tsv", "ck/phase1.ckpt", "ck/phase3.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    _, mismatch, errors = filecmp.cmpfiles(a / "ds", b / "ds", ["train.txt", "eval.txt", "classes.txt"],
                                           shallow=False)
    assert not mismatch and not errors
    _note(request, "gen-data, train and eval repeated with equal seeds")
