import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bikeflow.lstm import (LSTM_NAMES, LstmState, dropout_mask, init_lstm, lstm_backward, lstm_forward,
                           lstm_shapes, lstm_step, param_count_lstm)
from bikeflow.numerics import DomainError, RngStream, ShapeError


def random_weights(k, D, seed, scale=0.6):
    rng = np.random.default_rng(seed)
    return {n: rng.normal(scale=scale, size=s) for n, s in lstm_shapes(k, D).items()}


def scalar_step(x, h, c, w):
    """Gate-by-gate, unit-by-unit evaluation with plain floats."""
    k = len(h)
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    hn, cn = [], []
    for j in range(k):
        def pre(g):
            return (sum(w[f"W_{g}x"][j][d] * x[d] for d in range(len(x)))
                    + sum(w[f"W_{g}h"][j][r] * h[r] for r in range(k)) + w[f"b_{g}"][j])
        f, i, o = sig(pre("f")), sig(pre("i")), sig(pre("o"))
        g = math.tanh(pre("C"))
        cj = f * c[j] + i * g
        cn.append(cj)
        hn.append(math.tanh(cj) * o)
    return hn, cn


def zero_weights(k, D):
    return {n: np.zeros(s) for n, s in lstm_shapes(k, D).items()}


def test_step_zero_weights():
    w = zero_weights(1, 2)
    out = lstm_step(np.zeros(2), LstmState(np.zeros(1), np.array([2.0])), w)
    assert out.c[0] == pytest.approx(1.0, abs=1e-15)
    assert out.h[0] == pytest.approx(0.380797, abs=1e-6)
    out = lstm_step(np.ones(2), LstmState(np.zeros(1), np.zeros(1)), w)
    assert out.h[0] == 0.0 and out.c[0] == 0.0


def test_step_matches_scalar_oracle():
    w = random_weights(3, 2, seed=1)
    rng = np.random.default_rng(2)
    x, h, c = rng.normal(size=2), rng.uniform(-1, 1, 3), rng.normal(size=3)
    out = lstm_step(x, LstmState(h, c), w)
    hn, cn = scalar_step(x.tolist(), h.tolist(), c.tolist(), {n: v.tolist() for n, v in w.items()})
    assert_allclose(out.h, hn, rtol=1e-12, atol=1e-12)
    assert_allclose(out.c, cn, rtol=1e-12, atol=1e-12)


def test_step_shape_errors():
    w = random_weights(3, 2, seed=0)
    with pytest.raises(ShapeError):
        lstm_step(np.zeros(4), LstmState(np.zeros(3), np.zeros(3)), w)
    with pytest.raises(ShapeError):
        lstm_step(np.zeros(2), LstmState(np.zeros(2), np.zeros(2)), w)
    bad = dict(w, W_ih=np.zeros((3, 2)))
    with pytest.raises(ShapeError, match="W_ih"):
        lstm_step(np.zeros(2), LstmState(np.zeros(3), np.zeros(3)), bad)


def test_forward_single_step_is_lstm_step():
    w = random_weights(4, 3, seed=3)
    x = np.random.default_rng(4).normal(size=(1, 3))
    final, _ = lstm_forward(x, w)
    ref = lstm_step(x[0], LstmState(np.zeros(4), np.zeros(4)), w)
    assert_allclose(final.h, ref.h, rtol=1e-14, atol=1e-15)
    assert_allclose(final.c, ref.c, rtol=1e-14, atol=1e-15)


def test_forward_equals_chained_steps():
    w = random_weights(5, 3, seed=5)
    seq = np.random.default_rng(6).normal(size=(6, 3))
    state = LstmState(np.zeros(5), np.zeros(5))
    for t in range(6):
        state = lstm_step(seq[t], state, w)
    final, _ = lstm_forward(seq, w)
    assert_allclose(final.h, state.h, rtol=1e-13, atol=1e-14)
    batch, _ = lstm_forward(np.stack([seq, seq[::-1]]), w)
    assert_allclose(batch.h[0], state.h, rtol=1e-13, atol=1e-14)


def test_forward_train_without_dropout_equals_infer():
    w = random_weights(4, 2, seed=7)
    seq = np.random.default_rng(8).normal(size=(3, 6, 2))
    a, _ = lstm_forward(seq, w, dropout=0.0, mode="train", rng=RngStream(0))
    b, _ = lstm_forward(seq, w, mode="infer")
    assert_array_equal(a.h, b.h)


def test_forward_errors():
    w = random_weights(2, 2, seed=0)
    with pytest.raises(DomainError):
        lstm_forward(np.zeros((0, 2)), w)
    with pytest.raises(DomainError):
        lstm_forward(np.zeros((6, 2)), w, dropout=1.0)
    with pytest.raises(ShapeError):
        lstm_forward(np.zeros((6, 3)), w)
    with pytest.raises(DomainError):
        lstm_forward(np.zeros((6, 2)), w, dropout=0.2, mode="train")


def test_activation_ranges():
    w = random_weights(6, 4, seed=9, scale=3.0)
    seq = np.random.default_rng(10).normal(scale=5, size=(50, 6, 4))
    final, tape = lstm_forward(seq, w)
    for gate in (tape.f, tape.i, tape.o):
        assert np.all((gate >= 0) & (gate <= 1))
    assert np.all(np.abs(tape.g) <= 1) and np.all(np.abs(tape.tanh_c) <= 1)
    assert np.all(np.abs(final.h) <= 1)


def _loss(w, seq, v, mask):
    final, _ = lstm_forward(seq, w, dropout=0.2 if mask is not None else 0.0, mode="train", mask=mask)
    return float(np.sum(final.h * v))


@pytest.mark.parametrize("k,D,S", [(2, 1, 1), (2, 3, 6), (4, 1, 6), (4, 3, 1), (4, 3, 6)])
@pytest.mark.parametrize("with_mask", [False, True])
def test_backward_matches_finite_differences(k, D, S, with_mask):
    w = random_weights(k, D, seed=k * 100 + D * 10 + S)
    rng = np.random.default_rng(S)
    seq = rng.normal(size=(3, S, D))
    v = rng.normal(size=(3, k))
    mask = dropout_mask((3, k), 0.2, RngStream(1)) if with_mask else None
    final, tape = lstm_forward(seq, w, dropout=0.2 if with_mask else 0.0, mode="train", mask=mask)
    grads, dx = lstm_backward(tape, v, w)
    eps = 1e-5
    for name in LSTM_NAMES:
        num = np.zeros_like(w[name])
        for idx in np.ndindex(w[name].shape):
            old = w[name][idx]
            w[name][idx] = old + eps
            up = _loss(w, seq, v, mask)
            w[name][idx] = old - eps
            dn = _loss(w, seq, v, mask)
            w[name][idx] = old
            num[idx] = (up - dn) / (2 * eps)
        assert_allclose(grads[name], num, rtol=1e-4, atol=1e-8, err_msg=name)
    num = np.zeros_like(seq)
    for idx in np.ndindex(seq.shape):
        old = seq[idx]
        seq[idx] = old + eps
        up = _loss(w, seq, v, mask)
        seq[idx] = old - eps
        dn = _loss(w, seq, v, mask)
        seq[idx] = old
        num[idx] = (up - dn) / (2 * eps)
    assert_allclose(dx, num, rtol=1e-4, atol=1e-8)


def test_backward_zero_upstream_and_shapes():
    w = random_weights(3, 2, seed=11)
    _, tape = lstm_forward(np.ones((6, 2)), w)
    grads, dx = lstm_backward(tape, np.zeros(3), w)
    assert all(not g.any() for g in grads.values())
    assert dx.shape == (6, 2) and not dx.any()
    for name, shape in lstm_shapes(3, 2).items():
        assert grads[name].shape == shape
    with pytest.raises(ShapeError):
        lstm_backward(tape, np.zeros(4), w)


def test_dropout_preserves_expectation():
    h = np.linspace(-0.9, 0.9, 8)
    masks = dropout_mask((10**5, 8), 0.2, RngStream(3))
    masked = masks * h
    se = masked.std(axis=0) / np.sqrt(len(masked))
    assert np.all(np.abs(masked.mean(axis=0) - h) <= 3 * se + 1e-15)
    assert set(np.unique(masks)) == {0.0, 1.25}


def test_dropout_mask_shared_across_steps():
    w = random_weights(4, 2, seed=12)
    _, tape = lstm_forward(np.ones((2, 6, 2)), w, dropout=0.5, mode="train", rng=RngStream(4))
    for t in range(1, 6):
        h_prev = tape.tanh_c[t - 1] * tape.o[t - 1]
        assert_allclose(tape.h_in[t], h_prev * tape.mask)


def test_train_mode_deterministic():
    w = random_weights(4, 2, seed=13)
    seq = np.random.default_rng(0).normal(size=(5, 6, 2))
    a, _ = lstm_forward(seq, w, dropout=0.2, mode="train", rng=RngStream(9, 3))
    b, _ = lstm_forward(seq, w, dropout=0.2, mode="train", rng=RngStream(9, 3))
    assert_array_equal(a.h, b.h)


def test_init_and_param_count():
    w = init_lstm(32, 18, RngStream(0))
    bound = 1 / math.sqrt(32)
    assert all(np.all(np.abs(w[n]) <= bound) for n in LSTM_NAMES if n.startswith("W"))
    assert all(not w[n].any() for n in LSTM_NAMES if n.startswith("b"))
    assert sum(v.size for v in w.values()) == param_count_lstm(32, 18) == 6528
    assert param_count_lstm(64, 18) == 21248
    assert param_count_lstm(1, 1) == 12
