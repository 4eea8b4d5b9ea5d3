"""Network architectures behind one loss/gradient/prediction interface.

Parameters live in an ordered ``dict[str, ndarray]``; the key order returned
by ``param_shapes`` is the canonical order used for serialization and Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import baselines, lstm, mdn
from .numerics import LOG_2PI, RngStream

ARCHITECTURES = ("lstm-mdn", "lstm-regression", "lstm-dense-regression", "mlp-baseline")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "lstm-mdn"
    k: int = 32
    A: int = 6
    m: int = 6
    D: int = 18
    S: int = 6
    dropout: float = 0.2

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        for name in ("k", "A", "m", "D", "S"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def is_mixture(self) -> bool:
        return self.architecture == "lstm-mdn"

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    if cfg.architecture == "mlp-baseline":
        return baselines.mlp_shapes(cfg.S * cfg.D)
    shapes = dict(lstm.lstm_shapes(cfg.k, cfg.D))
    if cfg.architecture == "lstm-mdn":
        shapes.update(mdn.head_shapes(cfg.k, cfg.A))
    elif cfg.architecture == "lstm-regression":
        shapes.update(W_out=(cfg.k, 1), b_out=(1,))
    else:
        shapes.update(W_dense=(cfg.k, cfg.m), b_dense=(cfg.m,), W_out=(cfg.m, 1), b_out=(1,))
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form count of trainable scalars."""
    k, A, m, D, S = cfg.k, cfg.A, cfg.m, cfg.D, cfg.S
    if cfg.architecture == "lstm-mdn":
        return lstm.param_count_lstm(k, D) + k * 3 * A + 3 * A
    if cfg.architecture == "lstm-regression":
        return lstm.param_count_lstm(k, D) + k + 1
    if cfg.architecture == "lstm-dense-regression":
        return lstm.param_count_lstm(k, D) + (k * m + m) + (m + 1)
    if cfg.architecture == "mlp-baseline":
        return baselines.param_count_mlp(S * D)
    raise ConfigError(f"unknown architecture {cfg.architecture!r}")


def init_params(cfg: ModelConfig, rng: RngStream) -> dict[str, np.ndarray]:
    if cfg.architecture == "mlp-baseline":
        return baselines.init_mlp(cfg.S * cfg.D, rng)
    params = lstm.init_lstm(cfg.k, cfg.D, rng.child(0))
    head_rng = rng.child(1)
    if cfg.architecture == "lstm-mdn":
        params.update(mdn.init_head(cfg.k, cfg.A, head_rng))
    else:
        for name, shape in param_shapes(cfg).items():
            if name in params:
                continue
            if name.startswith("b"):
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = head_rng.gen.uniform(-bound, bound, size=shape)
    order = param_shapes(cfg)
    return {name: params[name] for name in order}


def _lstm_part(params):
    return {name: params[name] for name in lstm.LSTM_NAMES}


def _readout(cfg, params, h):
    """Point estimate from the final hidden state (regression architectures)."""
    if cfg.architecture == "lstm-regression":
        return (h @ params["W_out"] + params["b_out"])[:, 0], None
    z = h @ params["W_dense"] + params["b_dense"]
    return (z @ params["W_out"] + params["b_out"])[:, 0], z


def _as_batch(X, cfg):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    return X


def loss_and_grads(cfg: ModelConfig, params, X, y, mode: str = "train", rng: RngStream | None = None,
                   lstm_mask: np.ndarray | None = None):
    """Batch-mean loss and its gradient w.r.t. every parameter.

    Mixture models use the mean negative log-likelihood; the others use MSE.
    """
    X = _as_batch(X, cfg)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    B = X.shape[0]
    if cfg.architecture == "mlp-baseline":
        pred, cache = baselines.mlp_forward(X.reshape(B, -1), params, mode=mode, rng=rng,
                                            dropout=cfg.dropout, return_cache=True)
        r = pred - y
        grads, _ = baselines.mlp_backward(cache, 2.0 * r / B, params)
        return float(np.mean(r * r)), grads

    lw = _lstm_part(params)
    final, tape = lstm.lstm_forward(X, lw, dropout=cfg.dropout, mode=mode, rng=rng, mask=lstm_mask)
    h = final.h
    grads = {}
    if cfg.architecture == "lstm-mdn":
        hw = {"W_head": params["W_head"], "b_head": params["b_head"]}
        p = mdn.mdn_params(h, hw)
        loss = mdn.nll_loss(y, p)
        hg, dh = mdn.mdn_backward(y, p, h, hw)
        grads.update(hg)
    else:
        pred, z = _readout(cfg, params, h)
        r = pred - y
        loss = float(np.mean(r * r))
        dpred = (2.0 * r / B)[:, None]
        if cfg.architecture == "lstm-regression":
            grads["W_out"] = h.T @ dpred
            grads["b_out"] = dpred.sum(axis=0)
            dh = dpred @ params["W_out"].T
        else:
            grads["W_out"] = z.T @ dpred
            grads["b_out"] = dpred.sum(axis=0)
            dz = dpred @ params["W_out"].T
            grads["W_dense"] = h.T @ dz
            grads["b_dense"] = dz.sum(axis=0)
            dh = dz @ params["W_dense"].T
    lg, _ = lstm.lstm_backward(tape, dh, lw)
    grads.update(lg)
    return loss, {name: grads[name] for name in params}


def predict(cfg: ModelConfig, params, X):
    """Inference-mode output: MixtureParams for mixture models, else point estimates."""
    X = _as_batch(X, cfg)
    if cfg.architecture == "mlp-baseline":
        return baselines.mlp_forward(X.reshape(X.shape[0], -1), params, mode="infer")
    final, _ = lstm.lstm_forward(X, _lstm_part(params), mode="infer")
    if cfg.architecture == "lstm-mdn":
        return mdn.mdn_params(final.h, {"W_head": params["W_head"], "b_head": params["b_head"]})
    return _readout(cfg, params, final.h)[0]


def point_estimate(cfg: ModelConfig, params, X) -> np.ndarray:
    out = predict(cfg, params, X)
    return mdn.mixture_mean(out) if cfg.is_mixture else out


def eval_loss(cfg: ModelConfig, params, X, y, batch_size: int = 4096) -> float:
    """Inference-mode batch loss over a whole dataset (NLL or MSE)."""
    y = np.asarray(y, dtype=np.float64)
    total = 0.0
    for s in range(0, len(y), batch_size):
        out = predict(cfg, params, X[s:s + batch_size])
        yb = y[s:s + batch_size]
        if cfg.is_mixture:
            total += -np.sum(mdn.mixture_log_density(yb, out))
        else:
            total += np.sum((out - yb) ** 2)
    return float(total / len(y))


def gaussian_nll(y, pred, var: float) -> float:
    """Mean NLL of targets under N(pred, var): the likelihood used for point estimators."""
    r = np.asarray(y, dtype=np.float64) - pred
    return float(np.mean(0.5 * (LOG_2PI + np.log(var)) + r * r / (2.0 * var)))
