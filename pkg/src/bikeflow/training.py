"""Adam, dataset splitting, early-stopped training and the model file format."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import models
from .models import ModelConfig
from .numerics import DomainError, RngStream, ShapeError
from .pipeline import StandardizationStats

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
IMPROVEMENT_TOL = 1e-6

# RngStream ids; one independent stream per concern
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_DROPOUT = 3
STREAM_SPLIT = 4


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 512
    max_epochs: int = 1000
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise models.ConfigError("batch_size, max_epochs and patience must be positive")


@dataclass
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_dataset(n: int, seed: int) -> SplitIndices:
    """Random 70/10/20 split; rounding remainder goes to the test part."""
    if n < 10:
        raise DomainError(f"need at least 10 samples to split, got {n}")
    perm = RngStream(seed, STREAM_SPLIT).gen.permutation(n)
    n_train = (70 * n) // 100
    n_val = (10 * n) // 100
    return SplitIndices(train=perm[:n_train], validation=perm[n_train:n_train + n_val],
                        test=perm[n_train + n_val:])


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, weights) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in weights.items()},
                   {k: np.zeros_like(w) for k, w in weights.items()})


def adam_step(weights: dict, grads: dict, state: AdamState, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update; returns (new weights, new state)."""
    if t < 1:
        raise DomainError("Adam step index starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_w, new_m, new_v = {}, {}, {}
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, weight has {w.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_w[name] = w - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        new_m[name], new_v[name] = m, v
    return new_w, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict
    stats: StandardizationStats | None = None
    history: list = field(default_factory=list)   # (epoch, train_loss, val_loss)
    seed: int = 0
    best_epoch: int = 0
    residual_var: float = 1.0   # validation residual variance, point models only

    def predict(self, X):
        return models.predict(self.config, self.params, X)

    def point_estimate(self, X):
        return models.point_estimate(self.config, self.params, X)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data, val_data,
          stats: StandardizationStats | None = None, validation_loss=None,
          params: dict | None = None) -> TrainedModel:
    """Minimise the batch loss with Adam and per-epoch early stopping.

    `train_data` / `val_data` are (X, y) pairs of standardized arrays.
    `validation_loss(params, epoch) -> float` replaces the default
    inference-mode loss on `val_data`.  Returns the best-validation snapshot.
    """
    X, y = (np.asarray(a, dtype=np.float64) for a in train_data)
    Xv, yv = (np.asarray(a, dtype=np.float64) for a in val_data)
    if X.shape[1:] != (model_cfg.S, model_cfg.D):
        raise ShapeError(f"training inputs {X.shape[1:]} do not match config (S={model_cfg.S}, D={model_cfg.D})")
    if validation_loss is None:
        def validation_loss(p, epoch):
            return models.eval_loss(model_cfg, p, Xv, yv)

    seed = train_cfg.seed
    if params is None:
        params = models.init_params(model_cfg, RngStream(seed, STREAM_INIT))
    state = AdamState.zeros_like(params)
    shuffle_rng = RngStream(seed, STREAM_SHUFFLE)
    dropout_rng = RngStream(seed, STREAM_DROPOUT)

    n = len(y)
    bs = train_cfg.batch_size
    best = (np.inf, 0, params)
    history = []
    step = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        perm = shuffle_rng.child(epoch).gen.permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, bs)):
            idx = perm[s:s + bs]
            loss, grads = models.loss_and_grads(model_cfg, params, X[idx], y[idx], mode="train",
                                                rng=dropout_rng.child(epoch, b))
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            step += 1
            params, state = adam_step(params, grads, state, step, train_cfg)
            total += loss * len(idx)
        train_loss = total / n
        val_loss = float(validation_loss(params, epoch))
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        if val_loss < best[0] - IMPROVEMENT_TOL:
            best = (val_loss, epoch, params)
        logger.debug("epoch %d train %.6f val %.6f (best %d)", epoch, train_loss, val_loss, best[1])
        if epoch - best[1] >= train_cfg.patience:
            logger.info("early stop at epoch %d; best epoch %d", epoch, best[1])
            break

    result = TrainedModel(config=model_cfg, params=best[2], stats=stats, history=history,
                          seed=seed, best_epoch=best[1])
    if not model_cfg.is_mixture and len(yv):
        r = models.point_estimate(model_cfg, result.params, Xv) - yv
        result.residual_var = float(np.mean(r * r))
    return result


def write_history(model: TrainedModel, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tl, vl in model.history:
            out.writerow([epoch, _fmt(tl), _fmt(vl)])


# --------------------------------------------------------------------------
# model file


class ModelFileError(ValueError):
    pass


class ModelVersionError(ModelFileError):
    pass


class TruncatedModelError(ModelFileError):
    pass


class ModelShapeError(ModelFileError):
    pass


class ModelBlockError(ModelFileError):
    pass


MAGIC = "bikeflow-model"


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _fmt_row(values) -> str:
    return " ".join(_fmt(v) for v in values)


def save_model(model: TrainedModel, path) -> None:
    """Plain-text model file; floats carry 17 significant digits."""
    cfg = model.config
    lines = [f"{MAGIC} {FORMAT_VERSION}"]
    for f in fields(ModelConfig):
        lines.append(f"config.{f.name} {getattr(cfg, f.name)}")
    lines.append(f"seed {model.seed}")
    lines.append(f"best_epoch {model.best_epoch}")
    lines.append(f"residual_var {_fmt(model.residual_var)}")
    st = model.stats
    if st is None:
        lines.append("stats none")
    else:
        lines.append("stats " + ",".join(st.feature_names))
        lines.append("stats.feature_mean " + _fmt_row(st.feature_mean))
        lines.append("stats.feature_std " + _fmt_row(st.feature_std))
        lines.append(f"stats.target {_fmt(st.target_mean)} {_fmt(st.target_std)}")
    lines.append(f"history {len(model.history)}")
    for epoch, tl, vl in model.history:
        lines.append(f"{epoch} {_fmt(tl)} {_fmt(vl)}")
    for name, shape in models.param_shapes(cfg).items():
        w = np.asarray(model.params[name], dtype=np.float64)
        if w.shape != shape:
            raise ModelShapeError(f"parameter {name} has shape {w.shape}, expected {shape}")
        mat = w.reshape(shape[0], -1)
        lines.append(f"block {name} " + " ".join(str(s) for s in shape))
        lines.extend(_fmt_row(row) for row in mat)
    lines.append("end")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


class _Lines:
    def __init__(self, text: str, path):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0
        self.path = path

    def next(self, what: str) -> str:
        if self.pos >= len(self.lines):
            raise TruncatedModelError(f"{self.path}: file ends while reading {what}")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def keyed(self, key: str) -> str:
        line = self.next(key)
        head, _, rest = line.partition(" ")
        if head != key:
            raise ModelFileError(f"{self.path}:{self.pos}: expected '{key}', found '{head}'")
        return rest


def _floats(text: str, n: int, where: str) -> np.ndarray:
    parts = text.split()
    if len(parts) != n:
        raise ModelShapeError(f"{where}: expected {n} values, found {len(parts)}")
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError:
        raise ModelFileError(f"{where}: non-numeric value") from None


def load_model(path) -> TrainedModel:
    with open(path) as fh:
        src = _Lines(fh.read(), path)
    head = src.next("header").split()
    if len(head) != 2 or head[0] != MAGIC:
        raise ModelFileError(f"{path}: not a {MAGIC} file")
    if head[1] != str(FORMAT_VERSION):
        raise ModelVersionError(f"{path}: format version {head[1]}, this build reads {FORMAT_VERSION}")

    kwargs = {}
    for f in fields(ModelConfig):
        raw = src.keyed(f"config.{f.name}")
        try:
            kwargs[f.name] = {"str": str, "float": float, "int": int}[f.type](raw)
        except ValueError:
            raise ModelFileError(f"{path}: bad value for config.{f.name}: {raw!r}") from None
    cfg = ModelConfig(**kwargs)
    seed = int(src.keyed("seed"))
    best_epoch = int(src.keyed("best_epoch"))
    residual_var = float(src.keyed("residual_var"))
    names = src.keyed("stats")
    stats = None
    if names != "none":
        feature_names = tuple(names.split(","))
        D = len(feature_names)
        mean = _floats(src.keyed("stats.feature_mean"), D, "stats.feature_mean")
        std = _floats(src.keyed("stats.feature_std"), D, "stats.feature_std")
        tm, ts = _floats(src.keyed("stats.target"), 2, "stats.target")
        stats = StandardizationStats(feature_names, mean, std, float(tm), float(ts))
    history = []
    for _ in range(int(src.keyed("history"))):
        e, tl, vl = src.next("history").split()
        history.append((int(e), float(tl), float(vl)))

    params = {}
    for name, shape in models.param_shapes(cfg).items():
        line = src.next(f"block {name}")
        parts = line.split()
        if len(parts) < 2 or parts[0] != "block":
            raise ModelBlockError(f"{path}:{src.pos}: expected block header for {name}, found '{line[:40]}'")
        if parts[1] != name:
            raise ModelBlockError(f"{path}:{src.pos}: unexpected block '{parts[1]}', expected '{name}'")
        declared = tuple(int(p) for p in parts[2:])
        if declared != shape:
            raise ModelShapeError(f"{path}: block {name} declares shape {declared}, config implies {shape}")
        cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
        rows = [_floats(src.next(f"block {name}"), cols, f"block {name}") for _ in range(shape[0])]
        params[name] = np.concatenate(rows).reshape(shape)
    if src.next("end marker") != "end":
        raise ModelFileError(f"{path}: missing end marker")
    return TrainedModel(config=cfg, params=params, stats=stats, history=history, seed=seed,
                        best_epoch=best_epoch, residual_var=residual_var)
