"""City-wide hourly Poisson crash regression with swappable exposure series."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .numerics import DomainError, ShapeError, as_matrix, normal_cdf
from .pipeline import (STEPS_PER_HOUR, WEATHER_FIELDS, DataError, HolidayCalendar, WeatherTable,
                       format_timestamp, parse_timestamp, to_datetime)

log = logging.getLogger(__name__)

COVARIATES = (
    "log_visibility", "holiday", "log_exposure", "morning_peak", "afternoon_peak",
    "temp_below_0", "temp_above_20", "wind_below_5", "wind_above_9", "precip",
)
LABELS = {
    "intercept": "Intercept",
    "log_visibility": "Visibility (log)",
    "holiday": "Bank holiday",
    "log_exposure": "log(Exposure)",
    "morning_peak": "Morning peak (7-9)",
    "afternoon_peak": "Afternoon peak (15-17)",
    "temp_below_0": "Temperature < 0 C",
    "temp_above_20": "Temperature > 20 C",
    "wind_below_5": "Wind speed < 5 m/s",
    "wind_above_9": "Wind speed > 9 m/s",
    "precip": "Precipitation > 0 mm",
}


class DesignError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


# --------------------------------------------------------------------------
# covariates and exposure


def crash_covariates(hours, temp, wind, visibility, precip, holiday_flags, log_exposure) -> dict[str, np.ndarray]:
    """Hourly covariates; peak flags are keyed on weekday alone."""
    hours = np.asarray(hours)
    hod = (hours % 1440) // 60
    weekday = ((hours // 1440) + 3) % 7     # 1970-01-01 was a Thursday
    is_wd = weekday < 5
    temp = np.asarray(temp, dtype=np.float64)
    wind = np.asarray(wind, dtype=np.float64)
    return {
        "log_visibility": np.log(np.asarray(visibility, dtype=np.float64)),
        "holiday": np.asarray(holiday_flags, dtype=np.float64),
        "log_exposure": np.asarray(log_exposure, dtype=np.float64),
        "morning_peak": (is_wd & (hod >= 7) & (hod <= 9)).astype(np.float64),
        "afternoon_peak": (is_wd & (hod >= 15) & (hod <= 17)).astype(np.float64),
        "temp_below_0": (temp < 0).astype(np.float64),
        "temp_above_20": (temp > 20).astype(np.float64),
        "wind_below_5": (wind < 5).astype(np.float64),
        "wind_above_9": (wind > 9).astype(np.float64),
        "precip": (np.asarray(precip, dtype=np.float64) > 0).astype(np.float64),
    }


@dataclass
class ExposureSeries:
    hours: np.ndarray
    exposure: np.ndarray
    incomplete: np.ndarray    # hour lacks at least one station

    def complete(self) -> "ExposureSeries":
        keep = ~self.incomplete
        return ExposureSeries(self.hours[keep], self.exposure[keep], self.incomplete[keep])

    def to_csv(self, path) -> None:
        write_series(path, "exposure", self.hours, self.exposure, "%.6f")


def aggregate_exposure(station_ids, hours, values) -> ExposureSeries:
    """Sum per-station hourly estimates; hours missing any station are flagged."""
    station_ids = np.asarray(station_ids)
    hours = np.asarray(hours, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if not (len(station_ids) == len(hours) == len(values)):
        raise ShapeError("station, hour and value columns differ in length")
    grid, inv = np.unique(hours, return_inverse=True)
    total = np.bincount(inv, weights=values, minlength=len(grid))
    n_st = len(np.unique(station_ids))
    per_hour = np.bincount(inv, minlength=len(grid))
    return ExposureSeries(grid, total, per_hour < n_st)


def aawct_exposure(station_ids, hours, aawct) -> ExposureSeries:
    """Static exposure: each station's daily AAWCT spread evenly over 24 hours."""
    return aggregate_exposure(station_ids, hours, np.asarray(aawct, dtype=np.float64) / 24.0)


def write_series(path, column: str, hours, values, spec: str = "%.6f") -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["hour_utc", column])
        for h, v in zip(hours, values):
            out.writerow([format_timestamp(int(h)), spec % v])


def load_series(path, column: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a two-column `hour_utc,<column>` CSV into (hours, values)."""
    hours, vals, seen = [], [], {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["hour_utc", column]:
            raise DataError(f"{path}: expected header hour_utc,{column}, got {header}")
        for lineno, row in enumerate(rd, start=2):
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                h = parse_timestamp(row[0])
                vals.append(float(row[1]))
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            if h in seen:
                raise DataError(f"{path}:{lineno}: duplicate hour {row[0]} (first on line {seen[h]})")
            seen[h] = lineno
            hours.append(h)
    hours = np.array(hours, dtype=np.int64)
    order = np.argsort(hours)
    return hours[order], np.array(vals)[order]


# --------------------------------------------------------------------------
# dataset


@dataclass
class CrashDataset:
    hours: np.ndarray
    y: np.ndarray
    covariates: dict          # every COVARIATES entry except log_exposure
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.y)

    def design(self, exposure_hours, exposure) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(X with intercept, y, hours) restricted to hours with positive exposure."""
        pos = {int(h): v for h, v in zip(exposure_hours, exposure)}
        e = np.array([pos.get(int(h), np.nan) for h in self.hours])
        keep = np.isfinite(e) & (e > 0)
        cols = [np.ones(keep.sum())]
        for name in COVARIATES:
            cols.append(np.log(e[keep]) if name == "log_exposure" else self.covariates[name][keep])
        return np.column_stack(cols), self.y[keep], self.hours[keep]


def hourly_weather_table(weather: WeatherTable, hours) -> tuple[dict, np.ndarray]:
    """Hourly means (temp, wind, visibility) and precip sum; mask of usable hours."""
    hours = np.asarray(hours, dtype=np.int64)
    n = len(hours)
    idx = np.full((n, STEPS_PER_HOUR), -1)
    pos = {int(m): j for j, m in enumerate(weather.minutes)}
    for r, h in enumerate(hours):
        for s in range(STEPS_PER_HOUR):
            idx[r, s] = pos.get(int(h) + 10 * s, -1)
    ok = (idx >= 0).all(axis=1)
    v = weather.values[np.where(idx >= 0, idx, 0)]          # (n, 6, fields)
    col = {f: j for j, f in enumerate(WEATHER_FIELDS)}
    with np.errstate(invalid="ignore"):
        wind = v[..., col["wind_ms"]]
        n_wind = np.isfinite(wind).sum(axis=1)
        wind_mean = np.where(n_wind > 0, np.nansum(wind, axis=1) / np.maximum(n_wind, 1), np.nan)
    out = {
        "temp": v[..., col["temp_c"]].mean(axis=1),
        "wind": wind_mean,
        "visibility": v[..., col["visibility_m"]].mean(axis=1),
        "precip": v[..., col["precip_mm"]].sum(axis=1),
    }
    for a in out.values():
        ok &= np.isfinite(a)
    ok &= out["visibility"] > 0
    return out, ok


def build_crash_dataset(crash_hours, crash_counts, weather: WeatherTable, calendar: HolidayCalendar) -> CrashDataset:
    crash_counts = np.asarray(crash_counts, dtype=np.float64)
    if np.any(crash_counts < 0) or np.any(crash_counts != np.round(crash_counts)):
        raise DataError("crash counts must be non-negative integers")
    hw, ok = hourly_weather_table(weather, crash_hours)
    hours = np.asarray(crash_hours, dtype=np.int64)
    holiday = np.array([calendar.is_holiday(to_datetime(int(h)).date()) for h in hours], dtype=np.float64)
    cov = crash_covariates(hours, hw["temp"], hw["wind"], np.where(ok, hw["visibility"], 1.0),
                           hw["precip"], holiday, np.zeros(len(hours)))
    cov.pop("log_exposure")
    dropped = int((~ok).sum())
    if dropped:
        log.info("crash data: %d hours dropped for incomplete weather", dropped)
    return CrashDataset(hours=hours[ok], y=crash_counts[ok], covariates={k: v[ok] for k, v in cov.items()},
                        dropped=dropped)


# --------------------------------------------------------------------------
# Poisson GLM


@dataclass
class GlmFit:
    names: list
    coef: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    cov: np.ndarray
    loglik: float
    deviance: float
    chi2: float
    iterations: int
    converged: bool
    n_obs: int
    trace: list = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return len(self.coef)

    def fitted(self, X) -> np.ndarray:
        return np.exp(as_matrix(X) @ self.coef)


def poisson_loglik(y, eta) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))


def deviance(y, mu) -> float:
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if y.shape != mu.shape:
        raise ShapeError(f"{y.shape} counts vs {mu.shape} fitted values")
    if np.any(mu <= 0):
        raise DomainError("fitted means must be positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(t - (y - mu)))


def pearson_chi2(y, mu) -> float:
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if y.shape != mu.shape:
        raise ShapeError(f"{y.shape} counts vs {mu.shape} fitted values")
    if np.any(mu <= 0):
        raise DomainError("fitted means must be positive")
    return float(np.sum((y - mu) ** 2 / mu))


def poisson_fit(X, y, names=None, max_iter: int = 100, tol: float = 1e-8) -> GlmFit:
    """Newton-Raphson with step-halving for the canonical-link Poisson GLM.

    Converged when the largest absolute score component drops below `tol`.
    Raises NonConvergenceError (carrying the log-likelihood trace) otherwise.
    """
    X = as_matrix(X, "design matrix")
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if y.shape != (n,):
        raise ShapeError(f"{n} design rows but {y.size} counts")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DomainError("counts must be non-negative integers")
    if n < p or np.linalg.matrix_rank(X) < p:
        raise DesignError(f"design matrix is rank deficient ({p} columns)")
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise ShapeError(f"{len(names)} names for {p} columns")
    if not y.any():
        raise NonConvergenceError("all counts are zero: no finite maximum-likelihood estimate", [])

    # start from a weighted least-squares fit to log(y + 0.1)
    mu0 = y + 0.1
    sw = np.sqrt(mu0)
    beta = np.linalg.lstsq(X * sw[:, None], np.log(mu0) * sw, rcond=None)[0]
    eta = X @ beta
    ll = poisson_loglik(y, eta)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = np.exp(eta)
        score = X.T @ (y - mu)
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        info = X.T @ (X * mu[:, None])
        step = np.linalg.solve(info, score)
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            with np.errstate(over="ignore"):
                eta_c = X @ cand
                ll_c = poisson_loglik(y, eta_c) if np.all(eta_c < 700) else -math.inf
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise NonConvergenceError(f"step-halving failed at iteration {it}", trace)
        beta, eta, ll = cand, eta_c, ll_c
        trace.append(ll)
    else:
        mu = np.exp(eta)
        if np.max(np.abs(X.T @ (y - mu))) < tol:
            converged = True
    if not converged:
        raise NonConvergenceError(f"no convergence after {max_iter} iterations", trace)

    mu = np.exp(eta)
    info = X.T @ (X * mu[:, None])
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.diag(cov))
    z = beta / se
    pval = 2.0 * normal_cdf(-np.abs(z))
    return GlmFit(names=names, coef=beta, se=se, z=z, p=pval, cov=cov, loglik=ll,
                  deviance=deviance(y, mu), chi2=pearson_chi2(y, mu), iterations=it,
                  converged=True, n_obs=n, trace=trace)


# --------------------------------------------------------------------------
# exposure comparison


@dataclass
class ExposureComparison:
    fits: dict           # name -> GlmFit, or the error message when the fit failed
    n_obs: int
    dropped: int

    def best(self) -> str:
        ok = {k: f.loglik for k, f in self.fits.items() if isinstance(f, GlmFit)}
        return max(ok, key=ok.get)

    def rows(self) -> list[list[str]]:
        names = list(self.fits)
        out = []
        for term in ("intercept",) + COVARIATES:
            row = [LABELS[term]]
            for n in names:
                f = self.fits[n]
                if isinstance(f, GlmFit):
                    j = f.names.index(term)
                    row += ["%.3f" % f.coef[j], "%.3f" % f.p[j]]
                else:
                    row += ["-", "-"]
            out.append(row)

        def stat(label, get, spec):
            return [label] + [x for n in names for x in
                              ((spec % get(self.fits[n]), "") if isinstance(self.fits[n], GlmFit) else ("failed", ""))]
        out.append(stat("No. observations", lambda f: f.n_obs, "%d"))
        out.append(stat("Estimated parameters", lambda f: f.n_params, "%d"))
        out.append(stat("Log-likelihood", lambda f: f.loglik, "%.2f"))
        out.append(stat("Deviance", lambda f: f.deviance, "%.2f"))
        out.append(stat("Chi-squared", lambda f: f.chi2, "%.2f"))
        return out

    def header(self) -> list[str]:
        return ["term"] + [x for n in self.fits for x in (f"{n} estimate", f"{n} p")]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(self.header())
            out.writerows(self.rows())

    def format(self) -> str:
        rows = [self.header()] + self.rows()
        widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        notes = [f"{n}: {f}" for n, f in self.fits.items() if not isinstance(f, GlmFit)]
        return "\n".join(lines + notes) + "\n"


def compare_exposures(dataset: CrashDataset, exposures: dict) -> ExposureComparison:
    """Fit one Poisson model per exposure series on a shared set of hours.

    `exposures` maps a label to (hours, values).  Hours lacking a positive
    exposure in any series are dropped from all fits so the covariates agree.
    """
    if not exposures:
        raise DomainError("no exposure series given")
    common = set(int(h) for h in dataset.hours)
    for hours, vals in exposures.values():
        vals = np.asarray(vals, dtype=np.float64)
        common &= set(int(h) for h, v in zip(hours, vals) if np.isfinite(v) and v > 0)
    keep = np.array([int(h) in common for h in dataset.hours], dtype=bool)
    sub = CrashDataset(dataset.hours[keep], dataset.y[keep],
                       {k: v[keep] for k, v in dataset.covariates.items()}, dataset.dropped)
    dropped = int((~keep).sum())
    if dropped:
        log.info("crash comparison: %d hours dropped for missing exposure", dropped)
    names = ["intercept"] + list(COVARIATES)
    fits = {}
    for label, (hours, vals) in exposures.items():
        X, y, _ = sub.design(hours, vals)
        try:
            fits[label] = poisson_fit(X, y, names)
        except (NonConvergenceError, DesignError, DomainError) as e:
            fits[label] = f"fit failed: {e}"
    return ExposureComparison(fits=fits, n_obs=len(sub), dropped=dropped)
