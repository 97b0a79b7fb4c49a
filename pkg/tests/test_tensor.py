import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from expblend import tensor as T
from oracles import relative_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _vec(shape):
    return arrays(np.float64, shape, elements=finite)


# --------------------------------------------------------------------------
# forward primitives


def test_matmul_identity():
    a = T.Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((a @ T.Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_relu():
    np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 2.0])).data, [0, 2])


def test_default_dtype_is_float32_and_precision_switches():
    assert T.Tensor([1.0]).data.dtype == np.float32
    with T.precision(np.float64):
        assert T.Tensor([1.0]).data.dtype == np.float64
    assert T.Tensor([1.0]).data.dtype == np.float32


def test_conv2d_matches_direct_loop(f64):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    Ho, Wo = (5 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, Ho, Wo, 4))
    for b in range(2):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[b, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                ref[b, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2]))
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv1x1_is_pointwise_matmul(f64):
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(4, 5))
    np.testing.assert_allclose(T.conv1x1(T.Tensor(x), T.Tensor(w)).data, x @ w)


def test_max_min_flatten_add_scale():
    x = T.Tensor([[1.0, -3.0], [7.0, 2.0]])
    assert T.max(x).item() == 7.0
    assert T.min(x).item() == -3.0
    assert T.flatten(T.Tensor(np.zeros((2, 3, 4)))).shape == (2, 12)
    np.testing.assert_array_equal(T.add(x, 1.0).data, [[2, -2], [8, 3]])
    np.testing.assert_array_equal(T.scale(x, 2.0).data, [[2, -6], [14, 4]])


@pytest.mark.parametrize(
    "op",
    [
        lambda: T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3)))),
        lambda: T.add(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4))),
        lambda: T.mul(T.Tensor(np.zeros((2, 1))), T.Tensor(np.zeros((2, 2)))),
        lambda: T.conv2d(T.Tensor(np.zeros((1, 4, 4, 2))), T.Tensor(np.zeros((3, 3, 3, 1)))),
        lambda: T.bias_add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros(2))),
        lambda: T.reshape(T.Tensor(np.zeros(6)), (4,)),
    ],
)
def test_shape_mismatch_rejected(op):
    with pytest.raises(T.ShapeError):
        op()


def test_non_finite_input_rejected():
    with pytest.raises(T.NonFiniteError):
        T.relu(T.Tensor([1.0, np.nan]))
    with pytest.raises(T.NonFiniteError):
        T.matmul(T.Tensor([[np.inf]]), T.Tensor([[1.0]]))


def test_finite_check_has_no_false_positive_on_overflowing_sum():
    big = np.full(4, np.finfo(np.float32).max, dtype=np.float32)
    assert T.relu(T.Tensor(big)).data[0] == big[0]


# --------------------------------------------------------------------------
# cross-entropy


def test_cross_entropy_uniform_is_log_c():
    assert T.cross_entropy(T.Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_saturated_correct():
    logits = np.zeros((1, 5))
    logits[0, 2] = 40.0
    assert T.cross_entropy(T.Tensor(logits), [2]).item() < 1e-6


def test_cross_entropy_two_logit_value():
    # -log(e^0 / (e^1 + e^0)) = log(1 + e)
    assert T.cross_entropy(T.Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(1.313262, abs=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        T.cross_entropy(T.Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError):
        T.cross_entropy(T.Tensor(np.zeros((1, 3))), [-1])


@given(_vec((4, 6)), st.lists(st.integers(0, 5), min_size=4, max_size=4))
def test_cross_entropy_nonnegative_and_matches_per_sample(z, y):
    with T.precision(np.float64):
        loss = T.cross_entropy(T.Tensor(z), y).item()
    assert loss >= 0
    assert loss == pytest.approx(float(T.per_sample_cross_entropy(z, y).mean()), rel=1e-12, abs=1e-12)


# --------------------------------------------------------------------------
# tape


def test_backward_of_sum_is_ones():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(x)
    np.testing.assert_array_equal(tape.backward(loss, [x])[x], [1, 1, 1])


def test_backward_of_square():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.mul(x, x))
    np.testing.assert_array_equal(tape.backward(loss, [x])[x], [2, 4])


def test_unreachable_tensor_gets_zero_gradient():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.Tensor([[5.0]], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(x)
    g = tape.backward(loss, [x, y])
    np.testing.assert_array_equal(g[y], [[0.0]])


def test_backward_twice_rejected():
    x = T.Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(x)
    tape.backward(loss, [x])
    with pytest.raises(T.TapeError):
        tape.backward(loss, [x])


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(T.ShapeError):
        tape.backward(y, [x])
    with T.Tape() as other:
        loss = T.sum(x)
    with pytest.raises(T.TapeError):
        T.Tape().backward(loss, [x])
    assert other.backward(loss, [x])[x].tolist() == [1.0, 1.0]


def test_no_grad_records_nothing():
    x = T.Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            y = T.scale(x, 3.0)
    assert len(tape) == 0
    assert not y.requires_grad


def test_shared_input_accumulates():
    x = T.Tensor([3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.add(T.scale(x, 2.0), T.mul(x, x)))
    assert tape.backward(loss, [x])[x].tolist() == [2.0 + 6.0]


# --------------------------------------------------------------------------
# finite differences and gradient checks per primitive


def test_finite_diff_of_sum_is_ones(f64):
    x = T.Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    np.testing.assert_allclose(T.finite_diff(T.sum, x, 1e-4).data, np.ones((3, 2)), atol=1e-9)


def test_finite_diff_square(f64):
    x = T.Tensor(3.0)
    assert T.finite_diff(lambda t: T.mul(t, t), x, 1e-4).item() == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_restores_input(f64):
    x = T.Tensor(np.arange(4.0))
    T.finite_diff(T.sum, x)
    np.testing.assert_array_equal(x.data, np.arange(4.0))


def _check(loss_fn, *params, tol=1e-4):
    with T.Tape() as tape:
        loss = loss_fn()
    g = tape.backward(loss, params)
    for p in params:
        num = T.finite_diff(lambda _x: loss_fn(), p, 1e-5).data
        assert relative_error(g[p], num).max() <= tol


def _weights(rng, shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


PRIMITIVES = {
    "matmul": lambda r: (lambda a, b: T.sum(T.mul(T.matmul(a, b), T.matmul(a, b))), [(3, 4), (4, 2)]),
    "batched_matmul": lambda r: (lambda a, b: T.sum(T.relu(T.matmul(a, b))), [(2, 3, 4), (2, 4, 2)]),
    "conv2d": lambda r: (lambda x, w: T.sum(T.mul(T.conv2d(x, w, 2, 1), T.conv2d(x, w, 2, 1))), [(2, 5, 5, 2), (3, 3, 2, 3)]),
    "conv1x1": lambda r: (lambda x, w: T.max(T.conv1x1(x, w)), [(2, 2, 2, 3), (3, 2)]),
    "bias_add": lambda r: (lambda x, b: T.sum(T.mul(T.bias_add(x, b), T.bias_add(x, b))), [(2, 3, 4), (4,)]),
    "softmax": lambda r: (lambda x, c: T.sum(T.mul(T.softmax(x, axis=1), c)), [(3, 4), (3, 4)]),
    "softmax_axis0": lambda r: (lambda x, c: T.sum(T.mul(T.softmax(x, axis=0), c)), [(3, 4), (3, 4)]),
    "transpose_reshape": lambda r: (lambda x, c: T.sum(T.mul(T.reshape(T.transpose(x), (2, 6)), c)), [(2, 2, 3), (2, 6)]),
    "scale_add_min": lambda r: (lambda x, y: T.min(T.add(T.scale(x, -1.5), y)), [(3, 3), (3, 3)]),
    "cross_entropy": lambda r: (lambda z, w: T.cross_entropy(T.matmul(z, w), [0, 2, 1]), [(3, 4), (4, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients_match_finite_differences(name, seed, f64):
    rng = np.random.default_rng(seed)
    fn, shapes = PRIMITIVES[name](rng)
    params = [_weights(rng, s) for s in shapes]
    _check(lambda: fn(*params), *params)


# --------------------------------------------------------------------------
# sgd


def test_sgd_zero_gradient_keeps_value():
    p = T.Tensor([1.0])
    T.sgd_step([p], {p: np.zeros(1, np.float32)}, 0.01)
    assert p.data[0] == 1.0


def test_sgd_definition():
    p = T.Tensor([1.0], dtype=np.float64)
    T.sgd_step([p], {p: np.ones(1)}, 0.01)
    assert p.data[0] == pytest.approx(0.99)


def test_sgd_missing_gradient_rejected():
    p, q = T.Tensor([1.0]), T.Tensor([2.0])
    with pytest.raises(KeyError):
        T.sgd_step([p, q], {p: np.zeros(1)}, 0.01)


def test_sgd_rejects_non_positive_lr():
    p = T.Tensor([1.0])
    with pytest.raises(ValueError):
        T.sgd_step([p], {p: np.zeros(1)}, 0.0)


def test_sgd_step_decreases_linear_model_loss(f64):
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.normal(size=(16, 5)))
    y = rng.integers(0, 3, 16)
    w = _weights(rng, (5, 3))

    def loss():
        return T.cross_entropy(T.matmul(x, w), y)

    with T.Tape() as tape:
        before = loss()
    T.sgd_step([w], tape.backward(before, [w]), 1e-2)
    with T.no_grad():
        assert loss().item() < before.item()


# --------------------------------------------------------------------------
# properties


@given(_vec((3, 5)))
def test_softmax_rows_are_distributions(z):
    with T.precision(np.float64):
        s = T.softmax(T.Tensor(z), axis=1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


@given(st.integers(2, 12))
def test_cross_entropy_uniform_logits_equal_log_classes(c):
    assert T.cross_entropy(T.Tensor(np.zeros((2, c))), [0, c - 1]).item() == pytest.approx(math.log(c), rel=1e-6)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_ops_are_bitwise_deterministic(seed):
    def run():
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.normal(size=(2, 6, 6, 2)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum(T.softmax(T.flatten(T.conv2d(x, w, 2, 1)), axis=1))
        g = tape.backward(loss, [x, w])
        return loss.data.tobytes(), g[x].tobytes(), g[w].tobytes()

    assert run() == run()
