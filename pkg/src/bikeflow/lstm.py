"""Single-layer LSTM cell: forward step, unrolled forward, BPTT and dropout.

Weights are a plain dict keyed by the names in ``LSTM_NAMES``; input matrices
are k x D, recurrent matrices k x k, biases length k.  Every function accepts a
single sequence or a batch (leading batch axis) and always works in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DomainError, RngStream, ShapeError, sigmoid

GATES = ("f", "i", "C", "o")
LSTM_NAMES = (
    "W_fx", "W_ix", "W_ox", "W_Cx",
    "W_fh", "W_ih", "W_oh", "W_Ch",
    "b_f", "b_i", "b_o", "b_C",
)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LstmTape:
    """Per-step activations kept for backpropagation through time."""

    x: np.ndarray          # (S, B, D), time-major
    h_in: np.ndarray       # (S, B, k) recurrent input after dropout
    c_prev: np.ndarray     # (S, B, k)
    f: np.ndarray
    i: np.ndarray
    g: np.ndarray          # candidate cell state
    o: np.ndarray
    tanh_c: np.ndarray
    mask: np.ndarray | None  # (B, k) inverted-dropout mask, shared by all steps
    single: bool             # forward was called without a batch axis


def lstm_shapes(k: int, D: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for g in GATES:
        shapes[f"W_{g}x"] = (k, D)
        shapes[f"W_{g}h"] = (k, k)
        shapes[f"b_{g}"] = (k,)
    return {name: shapes[name] for name in LSTM_NAMES}


def lstm_dims(w: dict) -> tuple[int, int]:
    """Return (k, D) after checking every weight against that pair."""
    k, D = np.shape(w["W_fx"])
    for name, shape in lstm_shapes(k, D).items():
        if np.shape(w[name]) != shape:
            raise ShapeError(f"{name} has shape {np.shape(w[name])}, expected {shape}")
    return k, D


def init_lstm(k: int, D: int, rng: RngStream) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(k), 1/sqrt(k)) matrices, zero biases."""
    bound = 1.0 / np.sqrt(k)
    w = {}
    for name, shape in lstm_shapes(k, D).items():
        if name.startswith("b_"):
            w[name] = np.zeros(shape)
        else:
            w[name] = rng.gen.uniform(-bound, bound, size=shape)
    return w


def param_count_lstm(k: int, D: int) -> int:
    return 4 * k * (D + k + 1)


def _stacked(w: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Wx = np.concatenate([w[f"W_{g}x"] for g in GATES], axis=0)
    Wh = np.concatenate([w[f"W_{g}h"] for g in GATES], axis=0)
    b = np.concatenate([w[f"b_{g}"] for g in GATES])
    return Wx, Wh, b


def _gates(x, h, Wx, Wh, b, k):
    a = x @ Wx.T + h @ Wh.T + b
    f = sigmoid(a[..., :k])
    i = sigmoid(a[..., k:2 * k])
    g = np.tanh(a[..., 2 * k:3 * k])
    o = sigmoid(a[..., 3 * k:])
    return f, i, g, o


def lstm_step(x_t, prev: LstmState, w: dict) -> LstmState:
    k, D = lstm_dims(w)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != D:
        raise ShapeError(f"input has {x_t.shape[-1]} features, weights expect {D}")
    if np.shape(prev.h)[-1] != k or np.shape(prev.c)[-1] != k:
        raise ShapeError(f"state width {np.shape(prev.h)[-1]} does not match k={k}")
    f, i, g, o = _gates(x_t, prev.h, *_stacked(w), k)
    c = f * prev.c + i * g
    return LstmState(h=np.tanh(c) * o, c=c)


def dropout_mask(shape, rate: float, rng: RngStream) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.uniform(shape) >= rate
    return keep / (1.0 - rate)


def lstm_forward(seq, w: dict, dropout: float = 0.0, mode: str = "infer",
                 rng: RngStream | None = None, mask: np.ndarray | None = None):
    """Run the cell over a sequence from a zero initial state.

    `seq` is (S, D) or (B, S, D).  In train mode with dropout > 0 the
    recurrent input h_{t-1} is multiplied by one mask per sequence, drawn from
    `rng` unless an explicit `mask` is passed.  Returns (final state, tape).
    """
    if mode not in ("train", "infer"):
        raise DomainError(f"unknown mode {mode!r}")
    if not 0.0 <= dropout < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {dropout}")
    x = np.asarray(seq, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"sequence must be (S, D) or (B, S, D), got {np.shape(seq)}")
    B, S, D = x.shape
    if S < 1:
        raise DomainError("empty sequence")
    k, Dw = lstm_dims(w)
    if D != Dw:
        raise ShapeError(f"sequence has {D} features, weights expect {Dw}")

    if mode == "train" and mask is None and dropout > 0.0:
        if rng is None:
            raise DomainError("train-mode dropout needs an RngStream")
        mask = dropout_mask((B, k), dropout, rng)
    if mode == "infer":
        mask = None
    if mask is not None and mask.shape != (B, k):
        raise ShapeError(f"dropout mask shape {mask.shape} != {(B, k)}")

    Wx, Wh, b = _stacked(w)
    # time-major buffers; input projections for all steps in one product
    xt = np.ascontiguousarray(x.transpose(1, 0, 2))
    ax = (xt.reshape(S * B, D) @ Wx.T + b).reshape(S, B, 4 * k)
    WhT = Wh.T
    h = np.zeros((B, k))
    c = np.zeros((B, k))
    h_in = np.empty((S, B, k))
    c_prev = np.empty((S, B, k))
    gates = np.empty((S, B, 4 * k))
    tanh_c = np.empty((S, B, k))
    for t in range(S):
        hin = h * mask if mask is not None else h
        a = ax[t] + hin @ WhT
        gt = gates[t]
        np.tanh(a, out=gt)
        # sigmoid(z) = (1 + tanh(z/2)) / 2 on the f, i, o blocks
        gt[:, :2 * k] = 0.5 + 0.5 * np.tanh(0.5 * a[:, :2 * k])
        gt[:, 3 * k:] = 0.5 + 0.5 * np.tanh(0.5 * a[:, 3 * k:])
        h_in[t] = hin
        c_prev[t] = c
        c = gt[:, :k] * c + gt[:, k:2 * k] * gt[:, 2 * k:3 * k]
        np.tanh(c, out=tanh_c[t])
        h = tanh_c[t] * gt[:, 3 * k:]

    tape = LstmTape(x=xt, h_in=h_in, c_prev=c_prev, f=gates[..., :k], i=gates[..., k:2 * k],
                    g=gates[..., 2 * k:3 * k], o=gates[..., 3 * k:], tanh_c=tanh_c,
                    mask=mask, single=single)
    final = LstmState(h=h[0], c=c[0]) if single else LstmState(h=h, c=c)
    return final, tape


def lstm_backward(tape: LstmTape, upstream, w: dict):
    """Backpropagate a gradient on the final hidden state through the sequence.

    Returns (grads keyed like the weights, gradient w.r.t. the input sequence).
    Gradients are summed over the batch; scale `upstream` for a mean loss.
    """
    k, D = lstm_dims(w)
    dh = np.asarray(upstream, dtype=np.float64)
    if tape.single:
        dh = dh[None]
    S, B, _ = tape.x.shape
    if dh.shape != (B, k):
        raise ShapeError(f"upstream gradient shape {dh.shape} != {(B, k)}")

    Wx, Wh, _ = _stacked(w)
    dc = np.zeros((B, k))
    da = np.empty((S, B, 4 * k))
    for t in range(S - 1, -1, -1):
        f, i, g, o = tape.f[t], tape.i[t], tape.g[t], tape.o[t]
        tc = tape.tanh_c[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        da_t = da[t]
        da_t[:, :k] = dc * tape.c_prev[t] * f * (1.0 - f)
        da_t[:, k:2 * k] = dc * g * i * (1.0 - i)
        da_t[:, 2 * k:3 * k] = dc * i * (1.0 - g * g)
        da_t[:, 3 * k:] = dh * tc * o * (1.0 - o)
        dc = dc * f
        if t:
            dh = da_t @ Wh
            if tape.mask is not None:
                dh = dh * tape.mask

    da2 = da.reshape(S * B, 4 * k)
    dWx = da2.T @ tape.x.reshape(S * B, D)
    dWh = da2.T @ tape.h_in.reshape(S * B, k)
    db = da2.sum(axis=0)
    dx = (da2 @ Wx).reshape(S, B, D).transpose(1, 0, 2)

    grads = {}
    for n, gname in enumerate(GATES):
        sl = slice(n * k, (n + 1) * k)
        grads[f"W_{gname}x"] = dWx[sl]
        grads[f"W_{gname}h"] = dWh[sl]
        grads[f"b_{gname}"] = db[sl]
    grads = {name: grads[name] for name in LSTM_NAMES}
    return grads, (dx[0] if tape.single else dx)
