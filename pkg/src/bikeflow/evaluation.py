"""Goodness-of-fit measures, heat-map bins and weekly series exports.

All measures are on the standardized target scale.  For mixture models each
test sample gets 100 posterior draws from its own random stream, keyed by
(station, hour), so any subset of samples reproduces the same draws.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import mdn, models
from .baselines import FactorTable, svf_estimates
from .numerics import LOG_2PI, DomainError, RngStream, ShapeError
from .pipeline import SequenceSamples, format_timestamp, to_datetime

N_DRAWS = 100


@dataclass
class GofReport:
    model_id: str
    n_test: int
    draws: int
    nll_mu: float
    nll_hat: float = math.nan
    mse_mu: float = math.nan
    mse_hat: float = math.nan
    params: int | None = None
    estimates: np.ndarray | None = None   # per-sample conditional-average estimate

    ROW = ("model", "nll_mu", "nll_hat", "mse_mu", "mse_hat", "n_test", "draws", "params")

    def row(self) -> list:
        def f(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else "%.10g" % x
        return [self.model_id, f(self.nll_mu), f(self.nll_hat), f(self.mse_mu), f(self.mse_hat),
                self.n_test, self.draws, "" if self.params is None else self.params]


def sample_key(station_id, hour_minutes) -> tuple[int, int]:
    return zlib.crc32(str(station_id).encode()), int(hour_minutes) // 60


def posterior_draws(p: mdn.MixtureParams, station_ids, hours, rng: RngStream, n_draws: int = N_DRAWS):
    """(draws, components) arrays of shape (N, n_draws), one keyed stream per sample."""
    n = len(hours)
    draws = np.empty((n, n_draws))
    comps = np.empty((n, n_draws), dtype=np.int64)
    for j in range(n):
        d, c = mdn.sample(p[j], rng.child(*sample_key(station_ids[j], hours[j])), n=n_draws,
                          return_components=True)
        draws[j], comps[j] = d, c
    return draws, comps


def _predict_batched(model, X, batch: int = 4096):
    outs = [model.predict(X[s:s + batch]) for s in range(0, len(X), batch)]
    if model.config.is_mixture:
        return mdn.MixtureParams(*(np.concatenate([getattr(o, f) for o in outs]) for f in ("alpha", "mu", "nu")))
    return np.concatenate(outs)


def evaluate(model, samples: SequenceSamples, rng: RngStream, n_draws: int = N_DRAWS,
             model_id: str | None = None) -> GofReport:
    """Goodness-of-fit measures for a trained network on standardized test samples.

    nll_hat scores the observed target under the Gaussian component that
    produced each draw, averaged over draws and samples.  Point-estimate
    models only get nll_mu (Gaussian with the validation residual variance)
    and mse_mu.
    """
    if len(samples) == 0:
        raise DomainError("empty test set")
    cfg = model.config
    y = samples.y
    model_id = model_id or describe(cfg)
    out = _predict_batched(model, samples.X)
    if not cfg.is_mixture:
        return point_report(model_id, out, y, model.residual_var, params=models.param_count(cfg))

    draws, comps = posterior_draws(out, samples.station_id, samples.hour, rng, n_draws)
    mean_draw = draws.mean(axis=1)
    rows = np.arange(len(y))[:, None]
    mu_c, nu_c = out.mu[rows, comps], out.nu[rows, comps]
    r = y[:, None] - mu_c
    nll_hat = float(np.mean(0.5 * (LOG_2PI + np.log(nu_c)) + r * r / (2.0 * nu_c)))
    return GofReport(
        model_id=model_id, n_test=len(y), draws=n_draws,
        nll_mu=float(-np.mean(mdn.mixture_log_density(y, out))),
        nll_hat=nll_hat,
        mse_mu=float(np.mean((y - mean_draw) ** 2)),
        mse_hat=float(np.mean((y[:, None] - draws) ** 2)),
        params=models.param_count(cfg),
        estimates=mean_draw,
    )


def point_report(model_id: str, pred, y, residual_var: float, params: int | None = None) -> GofReport:
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise DomainError("empty test set")
    if pred.shape != y.shape:
        raise ShapeError(f"{pred.shape[0]} estimates for {y.shape[0]} targets")
    return GofReport(model_id=model_id, n_test=len(y), draws=1,
                     nll_mu=models.gaussian_nll(y, pred, residual_var),
                     mse_mu=float(np.mean((y - pred) ** 2)), params=params, estimates=pred)


def describe(cfg: models.ModelConfig) -> str:
    if cfg.architecture == "lstm-mdn":
        return f"LSTMMDN: L(k={cfg.k}) x G(A={cfg.A})"
    if cfg.architecture == "lstm-regression":
        return f"LSTM: L(k={cfg.k})"
    if cfg.architecture == "lstm-dense-regression":
        return f"LSTM: L(k={cfg.k})x{cfg.m}"
    return "ANN"


def improvement_pct(mse_model: float, mse_reference: float) -> float:
    if not mse_reference > 0:
        raise DomainError("reference MSE must be positive")
    return 100.0 * (mse_reference - mse_model) / mse_reference


def write_reports(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(GofReport.ROW)
        for r in reports:
            out.writerow(r.row())


def format_reports(reports) -> str:
    """Aligned text table in the layout of the comparison table."""
    header = ["model specification", "-logL_mu", "-logL_hat", "MSE_mu", "MSE_hat", "params"]
    rows = []
    for r in reports:
        def f(x, spec):
            return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else format(x, spec)
        rows.append([r.model_id, f(r.nll_mu, ".4f"), f(r.nll_hat, ".4f"), f(r.mse_mu, ".4f"),
                     f(r.mse_hat, ".4f"), "-" if r.params is None else f"{r.params:,}"])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) if j == 0 else str(x).rjust(w) for j, (x, w) in enumerate(zip(row, widths)))
             for row in [header] + rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# heat map


@dataclass
class HeatBins:
    edges: np.ndarray     # shared by both axes
    counts: np.ndarray    # [actual bin, estimated bin]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["actual_lo", "actual_hi", "estimate_lo", "estimate_hi", "count"])
            e = self.edges
            for a in range(len(e) - 1):
                for b in range(len(e) - 1):
                    out.writerow(["%.10g" % e[a], "%.10g" % e[a + 1], "%.10g" % e[b], "%.10g" % e[b + 1],
                                  int(self.counts[a, b])])


def heat_bins(actual, estimated, n_bins: int) -> HeatBins:
    actual = np.asarray(actual, dtype=np.float64)
    estimated = np.asarray(estimated, dtype=np.float64)
    if actual.shape != estimated.shape:
        raise ShapeError(f"{actual.size} actual values vs {estimated.size} estimates")
    if n_bins < 2:
        raise DomainError("need at least two bins")
    lo = min(actual.min(), estimated.min())
    hi = max(actual.max(), estimated.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _, _ = np.histogram2d(actual, estimated, bins=[edges, edges])
    return HeatBins(edges=edges, counts=counts.astype(np.int64))


# --------------------------------------------------------------------------
# weekly series


class WindowGapError(ValueError):
    pass


def weekly_series(model, samples: SequenceSamples, station, start_hour: int, rng: RngStream,
                  table: FactorTable, n_hours: int = 148, n_draws: int = N_DRAWS,
                  weekday_uses_aawct: bool = True) -> list[tuple]:
    """Rows (hour_utc, actual, model, svf) on the standardized scale.

    The model column is the mean of the posterior draws (mixture models) or
    the point estimate, using the same keyed streams as `evaluate`.
    """
    want = int(start_hour) + 60 * np.arange(n_hours)
    sel = np.flatnonzero(samples.station_id == station)
    pos = {int(h): j for j, h in zip(sel, samples.hour[sel])}
    missing = [format_timestamp(h) for h in want if int(h) not in pos]
    if missing:
        raise WindowGapError(f"station {station}: {len(missing)} missing hours in window: {', '.join(missing[:10])}")
    idx = np.array([pos[int(h)] for h in want])
    X = samples.X[idx]
    out = _predict_batched(model, X)
    if model.config.is_mixture:
        draws, _ = posterior_draws(out, samples.station_id[idx], samples.hour[idx], rng, n_draws)
        est = draws.mean(axis=1)
    else:
        est = out
    stats = model.stats
    raw = samples.raw
    when = [to_datetime(h) for h in want]
    holiday_col = list(raw.feature_names).index("holiday") if "holiday" in raw.feature_names else None
    holidays = raw.X[idx, 0, holiday_col] if holiday_col is not None else np.zeros(n_hours)
    svf_raw = svf_estimates(raw.aadct[idx], raw.aawct[idx], [t.month for t in when],
                            [t.weekday() for t in when], holidays, [t.hour for t in when], table,
                            weekday_uses_aawct)
    svf = stats.apply_target(svf_raw)
    return [(format_timestamp(h), float(a), float(m), float(s))
            for h, a, m, s in zip(want, samples.y[idx], est, svf)]


def write_series(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["hour_utc", "actual", "model", "svf"])
        for h, a, m, s in rows:
            out.writerow([h, "%.10g" % a, "%.10g" % m, "%.10g" % s])
