import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acvae import autodiff as ad
from acvae.autodiff import Tensor

from conftest import max_rel_err, numeric_grad, rel_err


def param(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).value, b)


def test_matmul_row_times_column():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).value.tolist() == [[11.0]]


def test_matmul_gradient_matches_fd(rng):
    A, B = param(rng.standard_normal((3, 3))), param(rng.standard_normal((3, 3)))
    assert max_rel_err(lambda: ad.sum(ad.matmul(A, B)), [A]) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


# -- softplus / sigmoid --------------------------------------------------------

def test_softplus_values():
    assert ad.softplus(Tensor(0.0)).value == pytest.approx(math.log(2), abs=1e-12)
    big = ad.softplus(Tensor(100.0)).value
    assert np.isfinite(big) and big == pytest.approx(100.0)
    assert ad.softplus(Tensor(-800.0)).value == 0.0


def test_softplus_derivative_is_sigmoid():
    x = param([1.3])
    with ad.Tape() as tape:
        tape.backward(ad.sum(ad.softplus(x)))
    assert x.grad[0] == pytest.approx(1 / (1 + math.exp(-1.3)), rel=1e-12)
    assert max_rel_err(lambda: ad.sum(ad.softplus(x)), [x]) < 1e-6


def test_sigmoid_values():
    assert ad.sigmoid(Tensor(0.0)).value == 0.5
    assert ad.sigmoid(Tensor(1.0)).value == pytest.approx(0.7310585786, abs=1e-9)
    assert ad.sigmoid(Tensor(-1000.0)).value == 0.0


def test_sigmoid_gradient(rng):
    x = param(rng.standard_normal(4))
    assert max_rel_err(lambda: ad.sum(ad.mul(ad.sigmoid(x), Tensor([1.0, -2.0, 3.0, 0.5]))), [x]) < 1e-6


# -- GRU -----------------------------------------------------------------------

def gru_params(rng, e, d, scale=0.5):
    return (param(scale * rng.standard_normal((e, 3 * d))),
            param(scale * rng.standard_normal((d, 3 * d))),
            param(scale * rng.standard_normal(3 * d)))


def test_gru_cell_zero_fixed_point():
    w, u, b = Tensor(np.zeros((3, 12))), Tensor(np.zeros((4, 12))), Tensor(np.zeros(12))
    out = ad.gru_cell(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 4))), w, u, b)
    np.testing.assert_array_equal(out.value, 0.0)


def test_gru_cell_gradients_all_gates(rng):
    w, u, b = gru_params(rng, 3, 4)
    x, h = param(rng.standard_normal((2, 3))), param(rng.standard_normal((2, 4)))
    weights = Tensor(rng.standard_normal((2, 4)))
    f = lambda: ad.sum(ad.mul(ad.gru_cell(x, h, w, u, b), weights))  # noqa: E731
    assert max_rel_err(f, [w, u, b, x, h]) < 1e-4


def test_gru_cell_composition_matches_sequence(rng):
    w, u, b = gru_params(rng, 3, 4)
    x = rng.standard_normal((2, 5, 3))
    h = Tensor(np.zeros((2, 4)))
    steps = []
    for t in range(5):
        h = ad.gru_cell(Tensor(x[:, t]), h, w, u, b)
        steps.append(h.value)
    np.testing.assert_allclose(ad.gru(Tensor(x), w, u, b).value, np.stack(steps, axis=1), rtol=1e-14, atol=1e-14)


def test_gru_two_steps_zero_input(rng):
    w, u, b = gru_params(rng, 3, 4)
    zero = Tensor(np.zeros((2, 3)))
    h1 = ad.gru_cell(zero, Tensor(np.zeros((2, 4))), w, u, b)
    h2 = ad.gru_cell(zero, h1, w, u, b)
    seq = ad.gru(Tensor(np.zeros((2, 2, 3))), w, u, b).value
    np.testing.assert_allclose(seq[:, 1], h2.value, rtol=1e-14)


def test_gru_sequence_gradients(rng):
    w, u, b = gru_params(rng, 3, 4)
    x = param(rng.standard_normal((2, 4, 3)))
    weights = Tensor(rng.standard_normal((2, 4, 4)))
    f = lambda: ad.sum(ad.mul(ad.gru(x, w, u, b), weights))  # noqa: E731
    assert max_rel_err(f, [w, u, b, x]) < 1e-4


def test_gru_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.gru_cell(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                    Tensor(np.zeros((3, 9))), Tensor(np.zeros((4, 12))), Tensor(np.zeros(12)))


# -- causal convolution ------------------------------------------------------

ROWS = np.array([[[1.0], [2.0], [3.0]]])


def test_conv_identity_filter():
    np.testing.assert_array_equal(ad.causal_conv(Tensor(ROWS), Tensor([[1.0]])).value, ROWS)


def test_conv_current_row_tap_is_last():
    np.testing.assert_array_equal(ad.causal_conv(Tensor(ROWS), Tensor([[0.0], [1.0]])).value, ROWS)


def test_conv_one_step_delay():
    out = ad.causal_conv(Tensor(ROWS), Tensor([[1.0], [0.0]])).value
    np.testing.assert_array_equal(out, [[[0.0], [1.0], [2.0]]])


def test_conv_filter_taller_than_sequence(rng):
    h = rng.standard_normal((1, 2, 3))
    f = np.array([5.0, 7.0, 0.5, 2.0])
    out = ad.causal_conv(Tensor(h), Tensor(f[:, None])).value
    np.testing.assert_allclose(out[0, 0], 2.0 * h[0, 0])
    np.testing.assert_allclose(out[0, 1], 2.0 * h[0, 1] + 0.5 * h[0, 0])


def test_conv_rejects_empty_filter():
    with pytest.raises(ValueError):
        ad.causal_conv(Tensor(ROWS), Tensor(np.zeros((0, 1))))


@given(st.integers(1, 5), st.integers(2, 8), st.data())
@settings(max_examples=50, deadline=None)
def test_conv_is_causal(m, T, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    t = data.draw(st.integers(0, T - 2))
    h = rng.standard_normal((2, T, 3))
    f = Tensor(rng.standard_normal((m, 1)))
    base = ad.causal_conv(Tensor(h), f).value
    h2 = h.copy()
    h2[:, t + 1:] = rng.standard_normal(h2[:, t + 1:].shape)
    np.testing.assert_array_equal(ad.causal_conv(Tensor(h2), f).value[:, :t + 1], base[:, :t + 1])


def test_conv_gradients(rng):
    h = param(rng.standard_normal((2, 5, 3)))
    f = param(rng.standard_normal((3, 1)))
    weights = Tensor(rng.standard_normal((2, 5, 3)))
    assert max_rel_err(lambda: ad.sum(ad.mul(ad.causal_conv(h, f), weights)), [h, f]) < 1e-6


# -- cross-entropy -----------------------------------------------------------

def test_cross_entropy_uniform():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros((1, 3, 4))), np.array([[1, 2, 3]]), np.ones((1, 3)))
    assert float(loss.value) == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((1, 1, 5))
    logits[0, 0, 2] = 1000.0
    loss = ad.softmax_cross_entropy(Tensor(logits), np.array([[2]]), np.ones((1, 1)))
    assert float(loss.value) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient(rng):
    logits = param(rng.standard_normal((1, 2, 5)))
    targets, mask = np.array([[3, 1]]), np.array([[1, 1]])
    assert max_rel_err(lambda: ad.softmax_cross_entropy(logits, targets, mask), [logits]) < 1e-4


def test_cross_entropy_empty_mask():
    with pytest.raises(ValueError, match="empty batch"):
        ad.softmax_cross_entropy(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int), np.zeros((1, 2)))


def test_cross_entropy_ignores_masked_positions(rng):
    logits = rng.standard_normal((2, 3, 4))
    mask = np.array([[1, 1, 0], [1, 0, 0]])
    targets = np.array([[1, 2, 0], [3, 0, 0]])
    base = ad.softmax_cross_entropy(Tensor(logits), targets, mask).value
    logits[0, 2] = 1e6
    logits[1, 1:] = -7.0
    assert ad.softmax_cross_entropy(Tensor(logits), targets, mask).value == base


@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 9), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_softmax_normalised_and_loss_nonnegative(b, T, V, seed):
    rng = np.random.default_rng(seed)
    logits = 10 * rng.standard_normal((b, T, V))
    probs = np.exp(ad.log_softmax_np(logits))
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    loss = ad.softmax_cross_entropy(Tensor(logits), rng.integers(0, V, (b, T)), np.ones((b, T)))
    assert float(loss.value) >= 0


# -- backward plumbing -------------------------------------------------------

def test_backward_sum_gives_ones():
    p = param([1.0, -2.0, 5.0])
    with ad.Tape() as tape:
        tape.backward(ad.sum(p))
    np.testing.assert_array_equal(p.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    p = param([3.0, -1.0])
    with ad.Tape() as tape:
        tape.backward(ad.sum(ad.mul(p, p)))
    np.testing.assert_array_equal(p.grad, [6.0, -2.0])


def test_backward_rejects_non_scalar():
    p = param([1.0, 2.0])
    with ad.Tape() as tape, pytest.raises(ValueError, match="scalar"):
        tape.backward(ad.mul(p, 2.0))


def test_unreachable_parameter_gets_zero_grad():
    p, q = param([1.0]), param([[2.0, 3.0]])
    with ad.Tape() as tape:
        tape.backward(ad.sum(p), [p, q])
    np.testing.assert_array_equal(q.grad, np.zeros((1, 2)))


def test_no_recording_outside_tape():
    p = param([1.0])
    out = ad.mul(p, 2.0)
    assert out.node_id is None and not out.requires_grad


def test_tape_is_topologically_ordered(rng):
    a, b = param(rng.standard_normal((2, 2))), param(rng.standard_normal((2, 2)))
    with ad.Tape() as tape:
        ad.sum(ad.sigmoid(ad.matmul(ad.add(a, b), b)))
    ids = [id(out) for out, _, _ in tape.nodes]
    assert len(ids) == len(set(ids))
    seen = set()
    for out, parents, _ in tape.nodes:
        for p in parents:
            assert p.node_id is None or id(p) in seen
        seen.add(id(out))


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        w = param(rng.standard_normal((4, 3)))
        x = Tensor(rng.standard_normal((5, 4)))
        with ad.Tape() as tape:
            loss = ad.sum(ad.softplus(ad.matmul(x, w)))
            tape.backward(loss)
        return float(loss.value), w.grad.tobytes()
    assert run() == run()


# -- randomized finite-difference sweep over every differentiable op ----------

def _unary(op):
    def build(rng, shape):
        x = param(rng.standard_normal(shape))
        w = Tensor(rng.standard_normal(shape))
        return (lambda: ad.sum(ad.mul(op(x), w))), [x]
    return build


def _binary(op):
    def build(rng, shape):
        x, y = param(rng.standard_normal(shape)), param(rng.standard_normal(shape))
        w = Tensor(rng.standard_normal(shape))
        return (lambda: ad.sum(ad.mul(op(x, y), w))), [x, y]
    return build


def _build_matmul(rng, shape):
    a = param(rng.standard_normal(shape))
    b = param(rng.standard_normal((shape[-1], 3)))
    w = Tensor(rng.standard_normal(shape[:-1] + (3,)))
    return (lambda: ad.sum(ad.mul(ad.matmul(a, b), w))), [a, b]


def _build_embedding(rng, shape):
    table = param(rng.standard_normal((6, shape[-1])))
    idx = rng.integers(0, 6, size=shape[:-1])
    w = Tensor(rng.standard_normal(shape))
    return (lambda: ad.sum(ad.mul(ad.embedding(table, idx), w))), [table]


def _build_concat(rng, shape):
    x, y = param(rng.standard_normal(shape)), param(rng.standard_normal(shape[:-1] + (2,)))
    w = Tensor(rng.standard_normal(shape[:-1] + (shape[-1] + 2,)))
    return (lambda: ad.sum(ad.mul(ad.concat([x, y]), w))), [x, y]


def _build_take_rows(rng, shape):
    x = param(rng.standard_normal(shape))
    idx = rng.integers(0, shape[0], size=shape[0] + 1)
    w = Tensor(rng.standard_normal((shape[0] + 1,) + shape[1:]))
    return (lambda: ad.sum(ad.mul(ad.take_rows(x, idx), w))), [x]


def _build_bias_add(rng, shape):
    x, b = param(rng.standard_normal(shape)), param(rng.standard_normal(shape[-1:]))
    w = Tensor(rng.standard_normal(shape))
    return (lambda: ad.sum(ad.mul(ad.add(x, b), w))), [x, b]


def _build_log_sigmoid(rng, shape):
    return _unary(ad.log_sigmoid)(rng, shape)


def _build_leaky(rng, shape):
    x = param(rng.standard_normal(shape) + 0.05)  # keep clear of the kink at 0
    x.value[np.abs(x.value) < 1e-2] = 0.5
    w = Tensor(rng.standard_normal(shape))
    return (lambda: ad.sum(ad.mul(ad.leaky_relu(x, 0.2), w))), [x]


def _build_mean_reshape(rng, shape):
    x = param(rng.standard_normal(shape))
    return (lambda: ad.mean(ad.mul(ad.reshape(x, (-1,)), ad.reshape(x, (-1,))))), [x]


OP_BUILDERS = {
    "add": _binary(ad.add), "sub": _binary(ad.sub), "mul": _binary(ad.mul),
    "softplus": _unary(ad.softplus), "sigmoid": _unary(ad.sigmoid), "tanh": _unary(ad.tanh),
    "log_sigmoid": _build_log_sigmoid, "leaky_relu": _build_leaky, "matmul": _build_matmul,
    "embedding": _build_embedding, "concat": _build_concat, "take_rows": _build_take_rows,
    "bias_add": _build_bias_add, "mean_reshape": _build_mean_reshape,
}


@pytest.mark.parametrize("op", sorted(OP_BUILDERS))
@given(shape=st.lists(st.integers(1, 3), min_size=2, max_size=3).map(tuple), seed=st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_random_shape_gradients(op, shape, seed):
    f, tensors = OP_BUILDERS[op](np.random.default_rng(seed), shape)
    assert max_rel_err(f, tensors, h=1e-5) < 1e-4
