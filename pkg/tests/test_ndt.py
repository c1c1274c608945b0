import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from beyondlab.augment import rotation_maps
from beyondlab.models import ClassifierNet
from beyondlab.ndt import (
    DegenerateEmbedding,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    cosine_similarity,
    evaluate,
    gradient_check,
    jvp,
    no_record,
    ops,
    row_cosine,
)
from beyondlab.ndt.tensor import emit


def grad_of(fn, x):
    leaf = Tensor(np.array(x, dtype=float), requires_grad=True, name="x")
    with Tape() as tape:
        out = fn(leaf)
    return backward(tape, out, {"x": leaf})["x"].data


# -- forward examples ------------------------------------------------------------------

def test_relu_example():
    assert ops.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_cross_entropy_uniform_logits():
    loss = ops.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
    assert loss.data[0] == pytest.approx(math.log(2), abs=1e-12)


def test_conv_all_ones_kernel_sums_windows():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2)))).data
    expected = [[x[0, 0, i:i + 2, j:j + 2].sum() for j in range(2)] for i in range(2)]
    assert out[0, 0].tolist() == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.sampled_from([1, 2, 3]),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 10_000))
def test_conv_matches_nested_loop_reference(n, cin, cout, hw, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    k = min(k, hw + 2 * pad)
    x = rng.normal(size=(n, cin, hw, hw))
    w = rng.normal(size=(cout, cin, k, k))
    fast = ops.conv2d(Tensor(x), Tensor(w), stride, pad).data
    np.testing.assert_allclose(fast, ops.conv2d_reference(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_cosine_examples():
    v = Tensor([0.3, -2.0, 5.0])
    assert cosine_similarity(v, v).item() == pytest.approx(1.0)
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(0.70711, abs=1e-5)


def test_cosine_zero_norm_is_degenerate():
    with pytest.raises(DegenerateEmbedding):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 1.0]))
    with pytest.raises(DegenerateEmbedding):
        row_cosine(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    c = cosine_similarity(Tensor(a), Tensor(b)).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12


# -- errors ------------------------------------------------------------------------------

def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as err:
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    assert err.value.primitive == "add"
    assert err.value.shapes == ((2, 3), (3, 2))
    assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_implicit_broadcast_but_scalars_work():
    with pytest.raises(ShapeError):
        ops.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    assert np.all(ops.mul(Tensor(np.ones((2, 3))), 2.0).data == 2.0)


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        ops.mul(Tensor([1e200]), Tensor([1e200]))
    with pytest.raises(ZeroDivisionError):
        ops.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    with Tape() as tape:
        y = ops.mul(x, x)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_detached_leaf_gets_zero_and_flag():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    z = Tensor([3.0, 4.0], requires_grad=True, name="z")
    with Tape() as tape:
        out = ops.sum(ops.mul(x, x))
    g = backward(tape, out, {"x": x, "z": z})
    assert g["z"].data.tolist() == [0.0, 0.0]
    assert g.detached == {"z"}
    assert "x" not in g.detached


# -- backward examples ------------------------------------------------------------------

def test_square_derivative():
    assert grad_of(lambda x: ops.mul(x, x), 3.0) == 6.0


def test_stop_gradient_example():
    assert grad_of(lambda x: ops.mul(ops.stop_gradient(x), x), 3.0) == 3.0


def test_stop_gradient_blocks_everything():
    g = grad_of(lambda x: ops.sum(ops.mul(ops.stop_gradient(ops.mul(x, x)), 2.0)), [1.0, -2.0])
    assert g.tolist() == [0.0, 0.0]


def test_backward_is_linear():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4))
    u = lambda x: ops.sum(ops.mul(ops.relu(x), x))
    v = lambda x: ops.l2norm(x)
    gu, gv = grad_of(u, x0), grad_of(v, x0)
    gc = grad_of(lambda x: ops.add(ops.mul(u(x), 2.5), ops.mul(v(x), -0.75)), x0)
    np.testing.assert_allclose(gc, 2.5 * gu - 0.75 * gv, rtol=1e-12, atol=1e-12)


def test_backward_deterministic():
    net = ClassifierNet(4, (3, 8, 8), widths=(2, 4), hidden=8, seed=1)
    x = np.random.default_rng(1).uniform(size=(2, 3, 8, 8))
    loss = lambda z: ops.sum(ops.softmax_cross_entropy(net(z), np.array([0, 3])))
    assert np.array_equal(grad_of(loss, x), grad_of(loss, x))


def test_full_cnn_gradient_against_finite_differences():
    net = ClassifierNet(4, (3, 8, 8), widths=(2, 4), hidden=8, seed=3)
    x = np.random.default_rng(3).uniform(0.2, 0.8, size=(1, 3, 8, 8))
    loss = lambda z: ops.sum(ops.softmax_cross_entropy(net(z), np.array([2])))
    rep = gradient_check(loss, x, tolerance=1e-4, step=1e-4)
    assert rep["pass"], rep.max_rel_error


def test_toy_classifier_gradient_check():
    net = ClassifierNet(10, seed=0)
    x = np.random.default_rng(4).uniform(0.1, 0.9, size=(1, 3, 32, 32))
    loss = lambda z: ops.sum(ops.softmax_cross_entropy(net(z), np.array([7])))
    rep = gradient_check(loss, x, tolerance=1e-3, step=1e-6, max_coords=200)
    assert rep["pass"], rep.max_rel_error


# -- gradient_check -----------------------------------------------------------------------

def test_gradient_check_quadratic_passes():
    x = np.random.default_rng(5).normal(size=7)
    rep = gradient_check(lambda z: ops.sum(ops.mul(z, z)), x, tolerance=1e-4)
    assert rep["pass"] and rep["max_rel_error"] < 1e-8


def _broken_square(x):
    return emit("broken", [x], x.data * x.data, lambda g: (g * x.data,), lambda t: t[0] * x.data)


def test_gradient_check_catches_broken_rule():
    x = np.random.default_rng(6).normal(size=5) + 2.0
    rep = gradient_check(lambda z: ops.sum(_broken_square(z)), x, tolerance=1e-4)
    assert not rep["pass"]
    assert rep.max_rel_error > 0.1


def test_gradient_check_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        gradient_check(lambda z: ops.sum(ops.mul(ops.mul(z, z), 1e307)), np.array([100.0, 1.0]))


PRIMITIVES = {
    "add": lambda x: ops.sum(ops.mul(ops.add(x, 0.5), ops.add(x, 0.5))),
    "sub": lambda x: ops.sum(ops.mul(ops.sub(1.0, x), x)),
    "mul": lambda x: ops.sum(ops.mul(ops.mul(x, x), x)),
    "div": lambda x: ops.sum(ops.div(ops.add(x, 5.0), ops.add(x, 3.0))),
    "relu": lambda x: ops.sum(ops.mul(ops.relu(x), x)),
    "clamp": lambda x: ops.sum(ops.mul(ops.clamp(x, -0.7, 0.7), x)),
    "mean": lambda x: ops.mean(ops.mul(x, x)),
    "l2norm": lambda x: ops.l2norm(x),
    "softmax_cross_entropy": lambda x: ops.sum(ops.softmax_cross_entropy(ops.reshape(x, (2, 3)), np.array([1, 2]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=10, deadline=None)
@given(x=arrays(np.float64, 6, elements=st.floats(-2, 2)))
def test_primitive_gradients_at_random_points(name, x):
    # keep clear of the kinks of relu/clamp
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    x = np.where(np.abs(np.abs(x) - 0.7) < 0.05, 0.3, x)
    assert gradient_check(PRIMITIVES[name], x, tolerance=1e-3)["pass"]


# -- tape and jvp --------------------------------------------------------------------------

def test_tape_topological_order_and_replay():
    net = ClassifierNet(3, (3, 8, 8), widths=(2, 4), hidden=8, seed=2)
    x = np.random.default_rng(2).uniform(size=(2, 3, 8, 8))
    fn = lambda x: ops.sum(ops.softmax_cross_entropy(net(x), np.array([0, 1])))
    net.set_trainable(True)
    out1, tape1 = evaluate(fn, {"x": x})
    out2, tape2 = evaluate(fn, {"x": x})
    seen = set()
    for rec in tape1.records:
        for t in rec.inputs:
            assert t.name is not None or id(t) in seen  # leaf or produced earlier
        seen.add(id(rec.output))
    assert [r.kind for r in tape1.records] == [r.kind for r in tape2.records]
    for a, b in zip(tape1.records, tape2.records):
        assert np.array_equal(a.output.data, b.output.data)
    assert out1.item() == out2.item()
    net.set_trainable(False)


def test_no_record_suspends_tape():
    x = Tensor([1.0], requires_grad=True, name="x")
    with Tape() as tape:
        with no_record():
            ops.mul(x, x)
        ops.mul(x, 2.0)
    assert len(tape) == 1


def test_jvp_matches_dense_jacobian_through_augmentation():
    rng = np.random.default_rng(8)
    x0 = rng.uniform(0.1, 0.9, size=(1, 3, 8, 8))
    idx, wt = rotation_maps(np.array([12.0]), 8, 8)
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))

    def f(x):
        y = ops.color_jitter(ops.resample(x, idx, wt), [1.1], [0.9])
        return ops.relu(ops.conv2d(y, w, padding=1))

    leaf = Tensor(x0, requires_grad=True, name="x")
    with Tape() as tape:
        out = f(leaf)
    # dense Jacobian, one reverse sweep per output coordinate
    m = out.size
    jac = np.stack([backward(tape, out, {"x": leaf}, seed=np.eye(m)[i].reshape(out.shape))["x"].data.ravel()
                    for i in range(m)])
    for _ in range(3):
        v = rng.normal(size=x0.shape)
        np.testing.assert_allclose(jvp(tape, [(leaf, v)], out).ravel(), jac @ v.ravel(), rtol=1e-10, atol=1e-10)
    # and against central differences of the forward map
    v = rng.normal(size=x0.shape)
    h = 1e-6
    fd = (f(Tensor(x0 + h * v)).data - f(Tensor(x0 - h * v)).data) / (2 * h)
    np.testing.assert_allclose(jvp(tape, [(leaf, v)], out), fd, rtol=1e-5, atol=1e-6)


def test_jvp_zero_when_independent():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    z = Tensor([1.0, 1.0], requires_grad=True, name="z")
    with Tape() as tape:
        out = ops.mul(z, 3.0)
    assert jvp(tape, [(x, np.ones(2))], out).tolist() == [0.0, 0.0]
