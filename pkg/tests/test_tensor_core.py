import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ifttn.tensor_core import (
    SGD,
    DropoutStream,
    Graph,
    OptimizerState,
    ShapeError,
    Tensor,
    add,
    backward,
    batch_norm,
    concat,
    conv2d,
    dropout,
    elementwise_add,
    get_default_dtype,
    getitem,
    global_avg_pool,
    grad_check,
    hadamard,
    linear,
    max_pool,
    mean,
    mul_const,
    no_grad,
    precision,
    relative_error,
    relu,
    reshape,
    scalar_scale,
    sgd_step,
    softmax_cross_entropy,
    softmax_np,
    stack,
    sub,
    sum_all,
)

from conftest import param, weighted_sum


# ------------------------------------------------------------- elementwise
def test_add_values_and_identity():
    a = Tensor([1.0, 2.0])
    np.testing.assert_array_equal(elementwise_add(a, Tensor([3.0, 4.0])).data, [4.0, 6.0])
    np.testing.assert_array_equal(add(a, Tensor(np.zeros(2))).data, a.data)


def test_add_backward_is_ones():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    sum_all(add(a, b)).backward()
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, np.ones((2, 3)))


def test_add_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_hadamard_values():
    np.testing.assert_array_equal(hadamard(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8.0, 15.0])
    a = Tensor([0.5, -1.5, 2.0])
    np.testing.assert_array_equal(hadamard(a, Tensor(np.ones(3))).data, a.data)
    with pytest.raises(ShapeError):
        hadamard(Tensor(np.zeros((2, 2))), Tensor(np.zeros(4)))


def test_hadamard_gradcheck(double, rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    assert grad_check(lambda a, b: weighted_sum(hadamard(a, b), w), [a, b]) < 1e-6


def test_scalar_scale_values_and_alpha_grad(double):
    alpha = Tensor(2.0, requires_grad=True)
    np.testing.assert_array_equal(scalar_scale(alpha, Tensor([1.0, 3.0])).data, [2.0, 6.0])
    one = Tensor(1.0)
    x = Tensor([0.25, -7.0])
    np.testing.assert_array_equal(scalar_scale(one, x).data, x.data)
    # d alpha of sum(alpha * [1, 1]) is exactly 2
    sum_all(scalar_scale(alpha, Tensor([1.0, 1.0]))).backward()
    assert np.asarray(alpha.grad).item() == 2.0


def test_scalar_scale_gradcheck(double, rng):
    alpha, x = Tensor(rng.normal(), requires_grad=True), param(rng, 2, 3)
    w = rng.normal(size=(2, 3))
    assert grad_check(lambda a, x: weighted_sum(scalar_scale(a, x), w), [alpha, x]) < 1e-6
    with pytest.raises(ShapeError):
        scalar_scale(Tensor([1.0, 2.0]), x)


def test_sub_mul_const_relu(double, rng):
    np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    a, b = param(rng, 5), param(rng, 5)
    w = rng.normal(size=5)
    assert grad_check(lambda a, b: weighted_sum(sub(a, b), w), [a, b]) < 1e-10
    assert grad_check(lambda a: weighted_sum(mul_const(a, -2.5), w), [a]) < 1e-10
    # keep relu inputs away from the kink
    x = Tensor(np.array([-1.0, -0.3, 0.4, 1.2, 2.0]), requires_grad=True)
    assert grad_check(lambda x: weighted_sum(relu(x), w), [x]) < 1e-6


# ---------------------------------------------------------------- shapes
def test_shape_ops_gradcheck(double, rng):
    x = param(rng, 2, 3, 4)
    wr = rng.normal(size=(6, 4))
    assert grad_check(lambda x: weighted_sum(reshape(x, (6, 4)), wr), [x]) < 1e-6
    w = np.random.default_rng(0).normal(size=(2, 2, 4))
    assert grad_check(lambda x: weighted_sum(getitem(x, (slice(None), slice(1, 3))), w), [x]) < 1e-6
    y = param(rng, 2, 3, 4)
    ws = np.random.default_rng(1).normal(size=(2, 2, 3, 4))
    assert grad_check(lambda x, y: weighted_sum(stack([x, y], 0), ws), [x, y]) < 1e-6
    wc = np.random.default_rng(2).normal(size=(2, 6, 4))
    assert grad_check(lambda x, y: weighted_sum(concat([x, y], 1), wc), [x, y]) < 1e-6
    wm = np.random.default_rng(3).normal(size=(2, 4))
    assert grad_check(lambda x: weighted_sum(mean(x, 1), wm), [x]) < 1e-6


def test_reshape_rejects_wrong_size():
    with pytest.raises((ShapeError, ValueError)):
        reshape(Tensor(np.zeros(6)), (4, 2))


# ------------------------------------------------------------------ conv
def test_conv_sum_of_ones_is_nine():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 1, 5, 4)).astype(np.float32))
    np.testing.assert_array_equal(conv2d(x, Tensor(np.ones((1, 1, 1, 1), np.float32))).data, x.data)


@pytest.mark.parametrize("size,k,stride,pad", [(5, 3, 1, 1), (5, 3, 2, 1), (6, 3, 2, 0), (7, 1, 2, 0), (4, 2, 1, 0)])
def test_conv_output_extent(size, k, stride, pad):
    out = conv2d(Tensor(np.zeros((1, 2, size, size))), Tensor(np.zeros((3, 2, k, k))), stride=stride, pad=pad)
    assert out.shape == (1, 3, (size + 2 * pad - k) // stride + 1, (size + 2 * pad - k) // stride + 1)


def test_conv_matches_direct_loops(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradcheck(double, rng):
    x, w, b = param(rng, 2, 3, 5, 5), param(rng, 4, 3, 3, 3, scale=0.5), param(rng, 4)
    probe = rng.normal(size=(2, 4, 3, 3))
    fn = lambda x, w, b: weighted_sum(conv2d(x, w, b, stride=2, pad=1), probe)
    assert grad_check(fn, [x, w, b]) < 1e-4


def test_conv_errors():
    with pytest.raises(ShapeError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="kernel"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# ----------------------------------------------------------- pooling, linear
def test_pool_and_linear(double, rng):
    c = Tensor(np.full((2, 3, 4, 4), 1.75))
    np.testing.assert_array_equal(global_avg_pool(c).data, np.full((2, 3), 1.75))
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(max_pool(x, 2).data.reshape(-1), [5.0, 7.0, 13.0, 15.0])

    xg = Tensor(rng.permutation(48).reshape(1, 3, 4, 4) / 10.0, requires_grad=True)  # distinct values: no ties
    wp, wa, wl_ = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    assert grad_check(lambda x: weighted_sum(max_pool(x, 2), wp), [xg]) < 1e-6
    xa = param(rng, 2, 3, 4, 4)
    assert grad_check(lambda x: weighted_sum(global_avg_pool(x), wa), [xa]) < 1e-6
    xl, wl, bl = param(rng, 4, 5), param(rng, 5, 3), param(rng, 3)
    assert grad_check(lambda x, w, b: weighted_sum(linear(x, w, b), wl_), [xl, wl, bl]) < 1e-6


# ------------------------------------------------------------- batch norm
def test_batch_norm_eval_identity(rng):
    x = Tensor(rng.normal(size=(3, 2, 4, 4)))
    out = batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), "eval")
    np.testing.assert_allclose(out.data, x.data, rtol=1e-5)


def test_batch_norm_train_stats_and_running_update(rng):
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
    rm, rv = np.zeros(3), np.ones(3)
    out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, "train")
    assert np.all(np.abs(out.data.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(out.data.var(axis=(0, 2, 3)) - 1) < 1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)))


def test_batch_norm_eval_deterministic(rng):
    x = Tensor(rng.normal(size=(2, 2, 3, 3)))
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, 2)
    g, b = Tensor(rng.normal(size=2)), Tensor(rng.normal(size=2))
    o1 = batch_norm(x, g, b, rm, rv, "eval").data
    o2 = batch_norm(x, g, b, rm, rv, "eval").data
    np.testing.assert_array_equal(o1, o2)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradcheck(double, rng, mode):
    x, g, b = param(rng, 3, 2, 4, 4), param(rng, 2), param(rng, 2)
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
    probe = rng.normal(size=(3, 2, 4, 4))
    fn = lambda x, g, b: weighted_sum(batch_norm(x, g, b, rm.copy(), rv.copy(), mode), probe)
    assert grad_check(fn, [x, g, b]) < 1e-4


def test_batch_norm_errors():
    with pytest.raises(ValueError):
        batch_norm(Tensor(np.zeros((0, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   np.zeros(2), np.ones(2), "train")
    with pytest.raises(ShapeError):
        batch_norm(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                   np.zeros(3), np.ones(3), "train")


# ---------------------------------------------------------------- dropout
def test_dropout_modes(rng):
    x = Tensor(rng.normal(size=(50, 40)))
    assert dropout(x, 0.0, rng, "train") is x
    assert dropout(x, 0.8, None, "eval") is x
    out = dropout(x, 0.5, np.random.default_rng(0), "train").data
    kept = out != 0
    np.testing.assert_allclose(out[kept], 2.0 * x.data[kept])
    assert 0.4 < kept.mean() < 0.6
    with pytest.raises(ValueError):
        dropout(x, 1.0, rng, "train")


def test_dropout_stream_is_order_independent():
    s = DropoutStream(5, step=3)
    a1 = s.generator("spatial.head").random(4)
    s.generator("temporal.head").random(100)
    a2 = s.generator("spatial.head").random(4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, s.at(4).generator("spatial.head").random(4))


# ----------------------------------------------------------- cross entropy
def test_cross_entropy_uniform_is_log_c():
    for c in (2, 5, 10):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, c))), [0, 1, c - 1])
        assert abs(loss.item() - math.log(c)) < 1e-6


def test_cross_entropy_gradient_identity(double, rng):
    logits = param(rng, 4, 5)
    labels = np.array([0, 3, 4, 1])
    softmax_cross_entropy(logits, labels).backward()
    expect = softmax_np(logits.data)
    expect[np.arange(4), labels] -= 1.0
    assert np.max(np.abs(logits.grad - expect / 4)) < 1e-10
    logits.grad = None
    assert grad_check(lambda z: softmax_cross_entropy(z, labels), [logits]) < 1e-6


def test_cross_entropy_label_errors():
    with pytest.raises(ValueError, match="out of range"):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- backward
def test_backward_sum_and_accumulation():
    x = Tensor(np.arange(4.0), requires_grad=True)
    sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))
    y = Tensor(np.arange(3.0), requires_grad=True)
    add(sum_all(y), sum_all(y)).backward()
    np.testing.assert_array_equal(y.grad, 2 * np.ones(3))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        mul_const(x, 2.0).backward()


def test_graph_topological_order_visits_each_node_once():
    x = Tensor(np.ones(2), requires_grad=True)
    y = hadamard(x, x)
    z = add(y, x)
    loss = sum_all(add(z, y))
    nodes = Graph.from_output(loss).nodes
    assert len(nodes) == len(set(map(id, nodes)))
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_backward_linearity(rng):
    a = Tensor(rng.normal(size=4), requires_grad=True)
    b = Tensor(rng.normal(size=4))
    w = rng.normal(size=4)
    weighted_sum(add(a, b), w).backward()
    g1 = a.grad.copy()
    a.grad = None
    weighted_sum(a, w).backward()
    np.testing.assert_array_equal(g1, a.grad)


def test_two_layer_net_gradcheck(double, rng):
    x = Tensor(rng.normal(size=(5, 4)))
    # modest weight scale keeps the softmax unsaturated so no gradient entry sits at FD round-off level
    w1, b1, w2, b2 = param(rng, 4, 6, scale=0.5), param(rng, 6, scale=0.5), param(rng, 6, 3, scale=0.5), param(rng, 3)
    labels = np.array([0, 1, 2, 1, 0])
    fn = lambda w1, b1, w2, b2: softmax_cross_entropy(linear(relu(linear(x, w1, b1)), w2, b2), labels)
    assert grad_check(fn, [w1, b1, w2, b2]) < 1e-4


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = add(x, x)
    assert not y.requires_grad and y._parents == ()


def test_precision_is_thread_local():
    seen = {}

    def worker():
        seen["worker"] = get_default_dtype()

    with precision("double"):
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert get_default_dtype() == np.float64
    assert seen["worker"] == np.float32
    assert get_default_dtype() == np.float32


def test_determinism_of_forward_and_grads(rng):
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

    def run():
        wt = Tensor(w, requires_grad=True)
        out = conv2d(Tensor(x), wt, pad=1)
        sum_all(relu(out)).backward()
        return out.data, wt.grad

    (o1, g1), (o2, g2) = run(), run()
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(g1, g2)


# --------------------------------------------------------------------- SGD
def test_sgd_plain_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    sgd_step({"p": p}, OptimizerState(0.1, 0.0, 0.0))
    assert p.data[0] == pytest.approx(0.9)
    assert p.grad is None


def test_sgd_zero_lr_leaves_params():
    p = Tensor(np.array([0.3, -2.0]), requires_grad=True)
    before = p.data.copy()
    p.grad = np.array([5.0, 1.0])
    sgd_step({"p": p}, OptimizerState(0.0, 0.9, 0.01))
    np.testing.assert_array_equal(p.data, before)


def test_sgd_momentum_recurrence():
    p = Tensor(np.array([0.0]), dtype=np.float64, requires_grad=True)
    opt = SGD({"p": p}, lr=0.1, momentum=0.9)
    g = 2.0
    for _ in range(2):
        p.grad = np.array([g])
        opt.step()
    assert p.data[0] == pytest.approx(-0.1 * (g + (0.9 * g + g)))


def test_sgd_weight_decay_and_missing_grad():
    p = Tensor(np.array([2.0]), dtype=np.float64, requires_grad=True)
    p.grad = np.array([0.0])
    sgd_step({"p": p}, OptimizerState(0.5, 0.0, 0.1))
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)
    with pytest.raises(ValueError, match="no gradient"):
        sgd_step({"p": p}, OptimizerState())


# -------------------------------------------------------------- grad_check
def test_grad_check_exact_on_linear(double, rng):
    x = param(rng, 6)
    w = rng.normal(size=6)
    assert grad_check(lambda x: weighted_sum(x, w), [x]) < 1e-10


def test_grad_check_flags_a_wrong_gradient(double, rng):
    x = param(rng, 4)

    def bad(x):
        out = Tensor._make(x.data ** 2, (x,), "bad", lambda g: x._accumulate(g * x.data))  # missing factor 2
        return sum_all(out)

    assert grad_check(bad, [x]) > 0.3


def test_grad_check_rejects_non_finite(double):
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        grad_check(lambda x: sum_all(mul_const(x, np.inf)), [x])


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-12])) == pytest.approx(1e-4)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_hadamard_backward_matches_closed_form(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    sum_all(hadamard(ta, tb)).backward()
    np.testing.assert_array_equal(ta.grad, b)
    np.testing.assert_array_equal(tb.grad, a)


def test_backward_helper_matches_method():
    x = Tensor(np.arange(3.0), requires_grad=True)
    backward(sum_all(mul_const(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0, 3.0])
