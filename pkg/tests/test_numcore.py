import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from targetapps import numcore as nc

import _cases

finite = st.floats(-50, 50, allow_nan=False)


# -- dense ----------------------------------------------------------------------

def test_dense_identity():
    y = nc.dense_forward(np.eye(2), np.zeros(2), np.array([3.0, 4.0]))
    assert np.allclose(y, [3.0, 4.0])


def test_dense_row_vector():
    y = nc.dense_forward(np.array([[1.0, 1.0]]), np.array([1.0]), np.array([2.0, 3.0]))
    assert np.allclose(y, [6.0])


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        nc.dense_forward(np.eye(2), np.zeros(2), np.ones(3))


def test_dense_input_gradient_is_column_sums():
    rng = np.random.default_rng(1)
    W, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    _, _, dx = nc.dense_backward(W, x, np.ones(3))
    assert np.allclose(dx, W.sum(axis=0))
    h = 1e-5
    numeric = np.array([(nc.dense_forward(W, b, x + h * e).sum() - nc.dense_forward(W, b, x - h * e).sum()) / (2 * h)
                        for e in np.eye(4)])
    assert np.linalg.norm(numeric - dx) / np.linalg.norm(dx) <= 1e-6


def test_dense_gradcheck():
    assert nc.gradient_check(*_cases.dense_case()).passed


# -- activations ----------------------------------------------------------------

def test_relu():
    assert np.array_equal(nc.relu(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_sigmoid_zero():
    assert nc.sigmoid(np.array([0.0]))[0] == 0.5


def test_sigmoid_extremes_are_finite():
    s = nc.sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(s))
    assert s[0] == pytest.approx(0.0) and s[1] == pytest.approx(1.0)


@pytest.mark.parametrize("c", [-40.0, 0.0, 3.5, 1e6])
def test_softmax_constant_vector(c):
    assert np.allclose(nc.softmax(np.full(3, c)), 1 / 3)


def test_softmax_empty_raises():
    with pytest.raises(ValueError):
        nc.softmax(np.zeros(0))


def test_softmax_mask():
    p = nc.softmax(np.array([1.0, 2.0, 3.0]), mask=np.array([True, False, True]))
    assert p[1] == 0.0
    assert p.sum() == pytest.approx(1.0)
    assert np.all(nc.softmax(np.ones(3), mask=np.zeros(3, bool)) == 0.0)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-50, 50))
def test_softmax_properties(x, shift):
    p = nc.softmax(x)
    assert np.all(p > 0) and np.all(p <= 1)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.allclose(nc.softmax(x + shift), p, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_activations_finite(x):
    for f in (nc.relu, nc.sigmoid, nc.softmax, np.tanh):
        assert np.all(np.isfinite(f(x)))


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=5), rng.normal(size=5)
    p = nc.softmax(x)
    analytic = nc.softmax_backward(p, w)
    h = 1e-5
    numeric = np.array([(w @ nc.softmax(x + h * e) - w @ nc.softmax(x - h * e)) / (2 * h) for e in np.eye(5)])
    assert np.allclose(analytic, numeric, atol=1e-9)


# -- LSTM ----------------------------------------------------------------------

def test_lstm_all_zero():
    H, D = 3, 2
    params = (np.zeros((4 * H, D)), np.zeros((4 * H, H)), np.zeros(4 * H))
    h, c, _ = nc.lstm_cell(params, np.ones(D), np.zeros(H), np.zeros(H))
    assert np.all(h == 0) and np.all(c == 0)


def test_lstm_saturated_forget_gate_keeps_cell():
    # bias 50 on the forget gate and -50 on the input gate: c_t = c_prev up to e^-50 terms
    H, D = 2, 3
    b = np.zeros(4 * H)
    b[:H] = -50.0
    b[H:2 * H] = 50.0
    params = (np.zeros((4 * H, D)), np.zeros((4 * H, H)), b)
    c_prev = np.array([0.7, -1.3])
    _, c, _ = nc.lstm_cell(params, np.ones(D), np.zeros(H), c_prev)
    assert np.allclose(c, c_prev, atol=1e-12)


def test_lstm_shape_mismatch():
    H, D = 2, 3
    params = (np.zeros((4 * H, D)), np.zeros((4 * H, H)), np.zeros(4 * H))
    with pytest.raises(ValueError):
        nc.lstm_cell(params, np.ones(D + 1), np.zeros(H), np.zeros(H))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lstm_cell_gradcheck(seed):
    report = nc.gradient_check(*_cases.lstm_cell_case(seed=seed, d=3, h=4))
    assert report.passed, report.errors


def test_lstm_sequence_gradcheck():
    rng = np.random.default_rng(3)
    store = nc.ParameterStore()
    store.add("Wx", rng.normal(scale=0.5, size=(12, 2)))
    store.add("Wh", rng.normal(scale=0.5, size=(12, 3)))
    store.add("b", rng.normal(scale=0.5, size=12))
    xs = rng.normal(size=(2, 4, 2))
    w = rng.normal(size=(2, 3))

    def loss_fn():
        store.zero_grad()
        params = (store["Wx"], store["Wh"], store["b"])
        h, caches = nc.lstm_forward(params, xs)
        dWx, dWh, db, _ = nc.lstm_backward(params, caches, w)
        store.grad("Wx")[...] += dWx
        store.grad("Wh")[...] += dWh
        store.grad("b")[...] += db
        return float(np.sum(w * h))

    assert nc.gradient_check(loss_fn, store).passed


# -- losses ---------------------------------------------------------------------

def test_mse_single():
    loss, grad = nc.mse(1.0, 0.5)
    assert loss == 0.25
    assert grad[0] == pytest.approx(-1.0)


def test_hinge_example():
    loss, d1, d2 = nc.hinge_pair(1.0, 0.0, 0.8, 0.5)
    assert loss == pytest.approx(0.7)
    assert d1[0] == -1.0 and d2[0] == 1.0


def test_hinge_satisfied_margin_and_tie_labels():
    assert nc.hinge_pair(1.0, 0.0, 2.0, 0.5)[0] == 0.0
    # equal labels: sign(0) = 0 so the loss is the constant 1 with no gradient
    loss, d1, d2 = nc.hinge_pair(1.0, 1.0, 0.3, 0.9)
    assert loss == 1.0 and d1[0] == 0.0 and d2[0] == 0.0


def test_cross_entropy_half():
    assert nc.cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_zero_probability_is_clamped():
    before = nc.numeric_warnings["cross_entropy_clamped"]
    loss = nc.cross_entropy(np.array([1.0, 0.0]), 1)
    assert loss == pytest.approx(-math.log(1e-12))
    assert nc.numeric_warnings["cross_entropy_clamped"] == before + 1


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    logits, target = rng.normal(size=(3, 5)), np.array([0, 4, 2])
    _, _, d = nc.softmax_cross_entropy(logits, target)
    h = 1e-5
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        e = np.zeros_like(logits)
        e[idx] = h
        num[idx] = (nc.softmax_cross_entropy(logits + e, target)[0]
                    - nc.softmax_cross_entropy(logits - e, target)[0]) / (2 * h)
    assert np.allclose(d, num, atol=1e-9)


# -- optimizers -----------------------------------------------------------------

def _store(value, grad):
    s = nc.ParameterStore()
    s.add("w", np.array(value, dtype=float))
    s.grad("w")[...] = grad
    return s


def test_sgd_step():
    s = _store([0.0], [1.0])
    nc.optimizer_step(s, nc.OptimizerState("sgd", lr=0.1))
    assert s["w"][0] == pytest.approx(-0.1)
    assert s.grad("w")[0] == 0.0


@pytest.mark.parametrize("algo", ["sgd", "adam"])
def test_zero_gradient_is_identity(algo):
    s = _store([1.5, -2.0], [0.0, 0.0])
    nc.optimizer_step(s, nc.OptimizerState(algo))
    assert np.array_equal(s["w"], [1.5, -2.0])


@pytest.mark.parametrize("g", [1e-3, 1.0, 250.0, -7.0])
def test_adam_first_step_magnitude(g):
    # at t=1 the bias-corrected update is lr * g / (|g| + eps)
    s = _store([0.0], [g])
    nc.optimizer_step(s, nc.OptimizerState("adam", lr=1e-3))
    assert abs(s["w"][0]) == pytest.approx(1e-3, rel=1e-4)
    assert np.sign(s["w"][0]) == -np.sign(g)


def test_nan_gradient_aborts_with_name():
    s = nc.ParameterStore()
    s.add("ok", np.zeros(2))
    s.add("bad", np.zeros(2))
    s.grad("ok")[...] = 1.0
    s.grad("bad")[0] = np.nan
    with pytest.raises(FloatingPointError, match="bad"):
        nc.optimizer_step(s, nc.OptimizerState("sgd", lr=0.1))
    assert np.array_equal(s["ok"], [0.0, 0.0])


def test_frozen_parameter_untouched():
    s = _store([1.0], [1.0])
    nc.optimizer_step(s, nc.OptimizerState("adam"), frozen=("w",))
    assert s["w"][0] == 1.0


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        nc.OptimizerState("rmsprop")


# -- gradient checker -----------------------------------------------------------

def _linear(x=1.7, corrupt=1.0):
    s = nc.ParameterStore()
    s.add("w", np.array([0.4]))

    def loss_fn():
        s.zero_grad()
        s.grad("w")[...] += corrupt * x
        return float(s["w"][0] * x)

    return loss_fn, s


def test_gradcheck_linear_model():
    report = nc.gradient_check(*_linear(), tolerance=1e-8)
    assert report.passed


def test_gradcheck_corrupted_gradient_names_parameter():
    report = nc.gradient_check(*_linear(corrupt=1.1))
    assert not report.passed
    assert report.failing() == ["w"]
    assert report.worst == "w"


@pytest.mark.parametrize("loss", ["pointwise", "pairwise"])
def test_gradcheck_cntas(loss):
    assert nc.gradient_check(*_cases.cntas_case(loss=loss, d=4)).passed


def test_gradcheck_neusa():
    assert nc.gradient_check(*_cases.neusa_case(d=4)).passed


# -- dropout --------------------------------------------------------------------

def test_dropout_rate_zero_identity():
    x = np.arange(5.0)
    y, mask = nc.dropout(x, 0.0, True, np.random.default_rng(0))
    assert np.array_equal(y, x) and mask is None


def test_dropout_inference_identity():
    x = np.arange(5.0)
    y, _ = nc.dropout(x, 0.9, False)
    assert np.array_equal(y, x)


def test_dropout_monte_carlo_mean():
    y, mask = nc.dropout(np.ones(100_000), 0.5, True, np.random.default_rng(5))
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) == {0.0, 2.0}
    assert np.array_equal(nc.dropout_backward(mask, np.ones(100_000)), mask)


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_rate_out_of_range(rate):
    with pytest.raises(ValueError):
        nc.dropout(np.ones(3), rate, True, np.random.default_rng(0))


# -- parameters and checkpoints ---------------------------------------------------

def test_initializers():
    rng = np.random.default_rng(0)
    u = nc.uniform_init(rng, (50, 4))
    assert np.all(np.abs(u) <= 0.05)
    g = nc.glorot_init(rng, (8, 4))
    assert np.all(np.abs(g) <= math.sqrt(6 / 12))


def test_snapshot_restore():
    s = _store([1.0, 2.0], [0.0, 0.0])
    snap = s.snapshot()
    s["w"][...] = 9.0
    s.restore(snap)
    assert np.array_equal(s["w"], [1.0, 2.0])
    assert s.num_parameters() == 2


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    s = nc.ParameterStore()
    s.add("a", rng.normal(size=(3, 2)))
    s.add("b", rng.normal(size=4))
    s.add("c", np.array(1.25))
    nc.save_checkpoint(tmp_path / "ck", s, {"seed": 3})
    loaded, meta = nc.load_checkpoint(tmp_path / "ck")
    assert meta == {"seed": 3}
    assert loaded.names() == s.names()
    for n in s.names():
        assert np.array_equal(loaded[n], s[n])
    blob = (tmp_path / "ck.bin").read_bytes()
    assert len(blob) == 8 * (6 + 4 + 1)
    assert np.frombuffer(blob[:8], "<f8")[0] == s["a"][0, 0]


def test_checkpoint_truncated_blob(tmp_path):
    s = _store([1.0, 2.0], [0.0, 0.0])
    nc.save_checkpoint(tmp_path / "ck", s)
    (tmp_path / "ck.bin").write_bytes((tmp_path / "ck.bin").read_bytes()[:8])
    with pytest.raises(ValueError, match="truncated"):
        nc.load_checkpoint(tmp_path / "ck")
