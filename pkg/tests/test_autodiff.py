import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from erinet import autodiff as ad
from erinet.autodiff import ParamStore, Tape, Tensor, grad_check


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i][j] += a[i][t] * b[t][j]
    return out


def param(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_against_triple_loop(rng):
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[1.0], [1.0]]
    assert naive_matmul(a, b) == [[3.0], [7.0]]
    np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))
    A, B = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    np.testing.assert_allclose(ad.matmul(Tensor(A), Tensor(B)).data, naive_matmul(A.tolist(), B.tolist()), rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_backward_rules(rng):
    A, B = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    G = rng.normal(size=(3, 2))
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(ad.matmul(A, B), Tensor(G)))
    tape.backward(loss)
    np.testing.assert_allclose(A.grad, G @ B.data.T)
    np.testing.assert_allclose(B.grad, A.data.T @ G)


# ---------------------------------------------------------------- elementwise


def test_elementwise_values():
    assert ad.sigmoid(Tensor(0.0)).data == 0.5
    assert ad.tanh(Tensor(0.0)).data == 0.0
    s = float(ad.sigmoid(Tensor(100.0)).data)
    assert 1 - 1e-6 < s <= 1.0 and math.isfinite(s)
    assert float(ad.sigmoid(Tensor(-1000.0)).data) >= 0.0


def test_elementwise_dispatch_and_shape_errors():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(ad.elementwise("add", a, b).data, [4, 6])
    np.testing.assert_array_equal(ad.elementwise("mul", a, b).data, [3, 8])
    with pytest.raises(ad.ShapeError):
        ad.add(a, Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        ad.elementwise("cube", a)


def test_add_bias_is_the_only_broadcast():
    x = Tensor(np.zeros((3, 2)))
    out = ad.add_bias(x, Tensor([1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [[1, 2]] * 3)
    with pytest.raises(ad.ShapeError):
        ad.add_bias(x, Tensor([1.0, 2.0, 3.0]))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)))
def test_no_overflow_for_moderate_inputs(x):
    for f in (ad.sigmoid, ad.tanh, ad.relu):
        assert np.isfinite(f(Tensor(x)).data).all()
    assert np.isfinite(ad.softmax(Tensor(x)).data).all()
    assert np.isfinite(ad.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data).all()


def test_non_finite_forward_is_an_error():
    with pytest.raises(ad.NumericalError):
        ad.add(Tensor([1.0]), Tensor([np.inf]))


# ---------------------------------------------------------------- softmax


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.7, 900.0])
def test_softmax_uniform(c):
    np.testing.assert_allclose(ad.softmax(Tensor([c] * 4)).data, [0.25] * 4, atol=1e-15)


def test_softmax_ln3():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], rtol=1e-14)


def test_softmax_large_logits_stable():
    y = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(y).all()
    assert y[0] == pytest.approx(1.0) and y[1] < 1e-300 + 1e-400 + 1e-100


def test_softmax_empty():
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.zeros(0)))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 12), elements=st.floats(-30, 30)),
    st.floats(-100, 100),
    st.randoms(use_true_random=False),
)
def test_softmax_properties(x, shift, rnd):
    y = ad.softmax(Tensor(x)).data
    assert (y > 0).all()
    assert abs(y.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(ad.softmax(Tensor(x + shift)).data, y, rtol=1e-9, atol=1e-15)
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(ad.softmax(Tensor(x[perm])).data, y[perm], rtol=1e-12, atol=1e-300)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_input_is_zero():
    out = ad.layer_norm(Tensor([4.0, 4.0, 4.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])


def test_layer_norm_hand_value():
    out = ad.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    expected = 1.0 / math.sqrt(1.0 + 1e-5)  # mean 0, var 1
    np.testing.assert_allclose(out.data, [expected, -expected], rtol=1e-14)
    np.testing.assert_allclose(out.data, [0.999995, -0.999995], atol=1e-8)


def test_layer_norm_shift_invariance(rng):
    x = rng.normal(size=7)
    g, b = Tensor(rng.normal(size=7)), Tensor(rng.normal(size=7))
    np.testing.assert_allclose(ad.layer_norm(Tensor(x + 7.0), g, b).data, ad.layer_norm(Tensor(x), g, b).data, atol=1e-12)


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = param(3.0)
    with Tape() as tape:
        loss = ad.mul(x, x)
    tape.backward(loss)
    assert x.grad == pytest.approx(6.0)


def test_backward_sigmoid_at_zero_matches_finite_difference():
    w, x = param([[0.0]]), Tensor([[1.0]])
    with Tape() as tape:
        loss = ad.sum_all(ad.sigmoid(ad.matmul(w, x)))
    tape.backward(loss)
    assert w.grad[0, 0] == pytest.approx(0.25, abs=1e-15)
    sig = lambda v: 1 / (1 + math.exp(-v))
    fd = (sig(1e-6) - sig(-1e-6)) / 2e-6
    assert w.grad[0, 0] == pytest.approx(fd, rel=1e-8)


def test_backward_accumulates_multiple_uses():
    x = param(5.0)
    with Tape() as tape:
        loss = ad.add(x, x)
    tape.backward(loss)
    assert x.grad == 2.0


def test_backward_requires_scalar():
    x = param([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_tape_order_and_no_recording_outside(rng):
    x = param(rng.normal(size=(2, 2)))
    y = ad.tanh(x)  # no tape active
    assert not y.requires_grad
    with Tape() as tape:
        a = ad.tanh(x)
        b = ad.matmul(a, a)
        ad.sum_all(b)
    ops = [n.op for n in tape.nodes]
    assert ops == ["tanh", "matmul", "sum_all"]
    produced = {id(n.output): i for i, n in enumerate(tape.nodes)}
    for i, n in enumerate(tape.nodes):
        assert all(produced.get(id(t), -1) < i for t in n.inputs)


def test_backward_is_bit_deterministic(rng):
    W = rng.normal(size=(4, 4))
    X = rng.normal(size=(3, 4))

    def run():
        w = param(W)
        with Tape() as tape:
            h = ad.tanh(ad.matmul(Tensor(X), w))
            loss = ad.sum_all(ad.softmax(ad.matmul(h, w)))
        tape.backward(loss)
        return w.grad

    assert np.array_equal(run(), run())


def test_param_store_names_and_zero_grads():
    store = ParamStore()
    store.add("video.gru.layer0.w_z", np.ones((2, 2)))
    with pytest.raises(KeyError):
        store.add("video.gru.layer0.w_z", np.ones(1))
    store["video.gru.layer0.w_z"].grad = np.ones((2, 2))
    store.zero_grads()
    assert not store["video.gru.layer0.w_z"].grad.any()


# ---------------------------------------------------------------- grad_check utility


def test_grad_check_linear_is_exact(rng):
    w = param(rng.normal(size=(3, 2)))
    c = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda: ad.sum_all(ad.mul(w, c)), [w]) < 1e-10


def test_grad_check_detects_corruption(rng):
    w = param(rng.normal(size=(3, 3)))
    f = lambda: ad.sum_all(ad.tanh(ad.matmul(w, w)))
    assert grad_check(f, [w]) < 1e-6
    assert grad_check(f, [w], corrupt=1.1) > 1e-2


PRIMITIVES = {
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (4, 3))),
    "mul": lambda a, b: ad.mul(a, ad.reshape(ad.index(b, slice(0, 12)), (3, 4))),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "tanh": lambda a, b: ad.tanh(a),
    "softmax": lambda a, b: ad.softmax(a, axis=-1),
    "layer_norm": lambda a, b: ad.layer_norm(a, ad.index(b, slice(0, 4)), ad.index(b, slice(4, 8))),
    "add_bias": lambda a, b: ad.add_bias(a, ad.index(b, slice(0, 4))),
    "concat_transpose": lambda a, b: ad.transpose(ad.concat([a, a], axis=0), (1, 0)),
    "bmm": lambda a, b: ad.bmm(ad.reshape(a, (1, 3, 4)), ad.reshape(b, (1, 4, 3))),
    "masked_mean": lambda a, b: ad.masked_mean(ad.reshape(a, (1, 3, 4)), np.array([[1, 1, 0]])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    for point in range(10):
        r = np.random.default_rng(point)
        a = param(r.normal(size=(3, 4)))
        b = param(r.normal(size=12))
        weights = Tensor(r.normal(size=PRIMITIVES[name](a, b).shape))
        f = lambda: ad.sum_all(ad.mul(PRIMITIVES[name](a, b), weights))
        assert grad_check(f, [a, b]) < 1e-4, (name, point)


def test_relu_gradient_away_from_kink(rng):
    a = param(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.5)
    w = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda: ad.sum_all(ad.mul(ad.relu(a), w)), [a]) < 1e-6


def test_dropout_train_only(rng):
    x = Tensor(np.ones((50, 50)))
    assert ad.dropout(x, 0.2, None) is x
    y = ad.dropout(x, 0.2, rng).data
    kept = y > 0
    assert 0.7 < kept.mean() < 0.9
    np.testing.assert_allclose(y[kept], 1.25)
