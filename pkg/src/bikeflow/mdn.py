"""Gaussian mixture density head on top of the LSTM hidden state.

The head is one linear layer, ``o = W_head^T h + b_head``, whose 3A outputs are
read as [mixing logits | means | log-variances].  Mixing weights come from a
softmax, variances from exp of the clamped log-variance output, means are the
raw outputs.  The variance convention is used throughout: component i has
density N(y; mu_i, nu_i) with nu_i a variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LOG_2PI, DomainError, RngStream, ShapeError, log_sum_exp, stable_softmax

LOGVAR_CLAMP = 20.0


@dataclass
class MixtureParams:
    """Mixture weights, means and variances; arrays are (A,) or (B, A)."""

    alpha: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    @property
    def n_components(self) -> int:
        return self.alpha.shape[-1]

    def __getitem__(self, idx) -> "MixtureParams":
        return MixtureParams(self.alpha[idx], self.mu[idx], self.nu[idx])

    def __len__(self) -> int:
        return 1 if self.alpha.ndim == 1 else self.alpha.shape[0]


def head_shapes(k: int, A: int) -> dict[str, tuple[int, ...]]:
    return {"W_head": (k, 3 * A), "b_head": (3 * A,)}


def init_head(k: int, A: int, rng: RngStream) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(k)
    return {"W_head": rng.gen.uniform(-bound, bound, size=(k, 3 * A)), "b_head": np.zeros(3 * A)}


def head_outputs(h, w: dict) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    W, b = w["W_head"], w["b_head"]
    if W.ndim != 2 or W.shape[1] % 3 or b.shape != (W.shape[1],):
        raise ShapeError(f"head weights {W.shape}/{b.shape} are not (k, 3A)/(3A,)")
    if h.shape[-1] != W.shape[0]:
        raise ShapeError(f"hidden state width {h.shape[-1]} != head input width {W.shape[0]}")
    return h @ W + b


def mdn_params(h, w: dict) -> MixtureParams:
    o = head_outputs(h, w)
    A = o.shape[-1] // 3
    return MixtureParams(
        alpha=stable_softmax(o[..., :A]),
        mu=o[..., A:2 * A].copy(),
        nu=np.exp(np.clip(o[..., 2 * A:], -LOGVAR_CLAMP, LOGVAR_CLAMP)),
    )


def check_params(p: MixtureParams, tol: float = 1e-9) -> None:
    if not (p.alpha.shape == p.mu.shape == p.nu.shape):
        raise ShapeError("alpha, mu and nu must share a shape")
    if np.any(p.alpha < 0) or np.any(np.abs(p.alpha.sum(axis=-1) - 1.0) > tol):
        raise DomainError("mixing weights must be non-negative and sum to one")
    if np.any(p.nu <= 0):
        raise DomainError("component variances must be positive")


def component_log_densities(y, p: MixtureParams) -> np.ndarray:
    """ln alpha_i + ln N(y; mu_i, nu_i) for every component."""
    y = np.asarray(y, dtype=np.float64)[..., None]
    r = y - p.mu
    with np.errstate(divide="ignore"):
        log_alpha = np.log(p.alpha)
    return log_alpha - 0.5 * (LOG_2PI + np.log(p.nu)) - r * r / (2.0 * p.nu)


def mixture_log_density(y, p: MixtureParams):
    return log_sum_exp(component_log_densities(y, p))


def nll_loss(y, p: MixtureParams) -> float:
    """Mean negative log-likelihood of targets `y` under per-sample mixtures."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.size == 0:
        raise DomainError("empty batch")
    if p.alpha.ndim == 1:
        p = MixtureParams(p.alpha[None], p.mu[None], p.nu[None])
    if p.alpha.shape[0] != y.shape[0]:
        raise ShapeError(f"{y.shape[0]} targets but {p.alpha.shape[0]} mixtures")
    return float(-np.mean(mixture_log_density(y, p)))


def mdn_backward(y, p: MixtureParams, h, w: dict):
    """Gradient of the batch-mean NLL w.r.t. W_head, b_head and h.

    Returns (grads dict, dh).  Uses the posterior responsibilities
    gamma_i = alpha_i N_i / sum_j alpha_j N_j.
    """
    y = np.asarray(y, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    if single:
        h, y = h[None], np.atleast_1d(y)
        p = MixtureParams(p.alpha[None], p.mu[None], p.nu[None])
    B = h.shape[0]
    if y.shape != (B,):
        raise ShapeError(f"targets shape {y.shape} != ({B},)")
    o = head_outputs(h, w)
    A = o.shape[-1] // 3
    if p.alpha.shape != (B, A):
        raise ShapeError(f"mixture shape {p.alpha.shape} != {(B, A)}")

    lc = component_log_densities(y, p)
    gamma = np.exp(lc - lc.max(axis=1, keepdims=True))
    gamma /= gamma.sum(axis=1, keepdims=True)
    r = y[:, None] - p.mu

    do = np.empty((B, 3 * A))
    do[:, :A] = p.alpha - gamma
    do[:, A:2 * A] = -gamma * r / p.nu
    lv = o[:, 2 * A:]
    inside = (lv > -LOGVAR_CLAMP) & (lv < LOGVAR_CLAMP)
    do[:, 2 * A:] = gamma * (0.5 - r * r / (2.0 * p.nu)) * inside
    do /= B

    grads = {"W_head": h.T @ do, "b_head": do.sum(axis=0)}
    dh = do @ w["W_head"].T
    return grads, (dh[0] if single else dh)


def mixture_mean(p: MixtureParams):
    return np.sum(p.alpha * p.mu, axis=-1)


def mixture_variance(p: MixtureParams):
    m = mixture_mean(p)
    return np.sum(p.alpha * (p.nu + p.mu * p.mu), axis=-1) - m * m


def sample(p: MixtureParams, rng: RngStream, n: int | None = None, return_components: bool = False):
    """Draw from a single mixture: component ~ Categorical(alpha), then Gaussian.

    With `n` given, returns n draws; otherwise a scalar.
    """
    if p.alpha.ndim != 1:
        raise ShapeError("sample() takes a single mixture; index batched params first")
    size = 1 if n is None else n
    cdf = np.cumsum(p.alpha)
    comp = np.searchsorted(cdf, rng.uniform(size) * cdf[-1], side="right")
    comp = np.minimum(comp, p.alpha.size - 1)
    draws = p.mu[comp] + np.sqrt(p.nu[comp]) * rng.normal(size)
    if n is None:
        draws, comp = float(draws[0]), int(comp[0])
    return (draws, comp) if return_components else draws
