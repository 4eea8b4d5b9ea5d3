"""Synthetic weather / count / crash panels with a known conditional law.

Hourly volumes are drawn from a two-component Gaussian mixture whose
parameters are an explicit function of station AADCT, hour, day type, the
hour's mean temperature, rain and snow.  Because the law is known exactly,
`true_nll` gives the Bayes-optimal NLL that a trained model is measured
against, and crash counts can be generated from the realised exposure.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .crash import crash_covariates
from .baselines import DAY_TYPES, FactorTable, day_type, profile_factor_table
from .mdn import MixtureParams, mixture_log_density
from .numerics import DomainError, RngStream
from .pipeline import (WEATHER_FIELDS, WEATHER_HEADER, HolidayCalendar, RawSamples,
                       format_timestamp, parse_timestamp)

STREAM_WEATHER = 11
STREAM_MISSING = 12
STREAM_COUNTS = 13
STREAM_CRASHES = 14

DAY_TYPE_FACTOR = {"weekday": 1.10, "saturday": 0.80, "sunday-holiday": 0.65}
VAR_FLOOR = float(np.exp(-20.0))


class ManifestError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    seed: int = 0
    start: str = "2017-01-01"
    n_days: int = 730
    station_aadct: tuple = (3000.0, 4500.0, 7000.0, 10000.0)
    annual_growth: float = 0.03
    # conditional mixture
    n_components: int = 2
    noise_rel: float = 0.12
    noise_abs: float = 4.0
    temp_effect: float = 0.03
    snow_factor: float = 0.7
    disrupted_ratio: float = 0.55
    alpha_dry: float = 0.15
    alpha_rain: float = 0.65
    # weather process
    temp_mean: float = 8.5
    temp_seasonal_amp: float = 8.5
    temp_diurnal_amp: float = 3.5
    rain_start_prob: float = 0.012
    rain_stop_prob: float = 0.05
    wind_missing_winter: float = 0.6
    wind_missing_summer: float = 0.15
    fallback_missing: float = 0.04
    # crash model: log rate = intercept + sum coef * covariate, intercept
    # calibrated so the mean hourly rate equals crash_rate
    crash_rate: float = 0.08
    crash_coef: dict = field(default_factory=lambda: {
        "log_visibility": -0.06, "holiday": -0.3, "log_exposure": 1.0,
        "morning_peak": 0.25, "afternoon_peak": 0.28, "temp_below_0": -0.1,
        "temp_above_20": 0.2, "wind_below_5": 0.15, "wind_above_9": -0.05,
        "precip": 0.12,
    })

    @property
    def station_ids(self) -> list[str]:
        return [f"S{j + 1:02d}" for j in range(len(self.station_aadct))]

    def aadct(self, station_index: int, year: int) -> float:
        first = dt.date.fromisoformat(self.start).year
        return float(np.round(self.station_aadct[station_index] * (1 + self.annual_growth) ** (year - first), 1))


def hour_shape(dtype: str) -> np.ndarray:
    """Normalised 24-hour share of daily traffic for a day type."""
    h = np.arange(24, dtype=np.float64)

    def bump(c, w):
        return np.exp(-0.5 * ((h - c) / w) ** 2)

    if dtype == "weekday":
        s = 0.10 + 1.0 * bump(8.0, 1.1) + 0.85 * bump(16.5, 1.4) + 0.35 * bump(12.5, 3.5)
    elif dtype == "saturday":
        s = 0.10 + 1.0 * bump(13.0, 3.2)
    elif dtype == "sunday-holiday":
        s = 0.10 + 0.9 * bump(14.0, 3.4)
    else:
        raise DomainError(f"unknown day type {dtype!r}")
    return s / s.sum()


def true_profile_table() -> FactorTable:
    """Factor table carrying the generator's exact day-type profiles (no weather)."""
    return profile_factor_table({d: hour_shape(d) for d in DAY_TYPES})


# --------------------------------------------------------------------------
# holidays


def easter(year: int) -> dt.date:
    """Gregorian Easter Sunday (anonymous Gregorian algorithm)."""
    a = year % 19
    b, c = divmod(year, 100)
    d, e = divmod(b, 4)
    f = (b + 8) // 25
    g = (b - f + 1) // 3
    h = (19 * a + b - d - g + 15) % 30
    i, k = divmod(c, 4)
    l = (32 + 2 * e + 2 * i - h - k) % 7
    m = (a + 11 * h + 22 * l) // 451
    month, day = divmod(h + l - 7 * m + 114, 31)
    return dt.date(year, month, day + 1)


def danish_holidays(year: int) -> list[dt.date]:
    e = easter(year)
    offsets = (-3, -2, 1, 26, 39, 50)  # Maundy Thu, Good Fri, Easter Mon, Prayer Day, Ascension, Whit Mon
    fixed = [(1, 1), (6, 5), (12, 24), (12, 25), (12, 26), (12, 31)]
    days = [e] + [e + dt.timedelta(days=o) for o in offsets] + [dt.date(year, m, d) for m, d in fixed]
    return sorted(set(days))


# --------------------------------------------------------------------------
# weather


def _ar1(rng: RngStream, n: int, phi: float, sd: float) -> np.ndarray:
    eps = rng.normal(n) * sd
    eps[0] /= np.sqrt(1 - phi * phi)
    return lfilter([1.0], [1.0, -phi], eps)


def _weather(cfg: GeneratorConfig, minutes: np.ndarray, rng: RngStream) -> np.ndarray:
    n = len(minutes)
    day = minutes / 1440.0
    doy = np.array([d.timetuple().tm_yday for d in
                    (dt.date(1970, 1, 1) + dt.timedelta(days=int(x)) for x in np.floor(day))])
    hod = (minutes % 1440) / 60.0
    season = np.cos(2 * np.pi * (doy - 20) / 365.25)   # +1 mid-January, -1 mid-July

    temp = (cfg.temp_mean - cfg.temp_seasonal_amp * season
            + cfg.temp_diurnal_amp * np.sin(2 * np.pi * (hod - 9) / 24)
            + _ar1(rng.child(0), n, 0.995, 0.15))
    pressure = 1013.0 + _ar1(rng.child(1), n, 0.999, 0.2)
    wind = np.clip(4.5 + 1.0 * season + _ar1(rng.child(2), n, 0.99, 0.3), 0.0, None)
    gust = wind * 1.5 + np.abs(rng.child(3).normal(n))
    wind_dir = np.mod(200.0 + np.cumsum(rng.child(4).normal(n) * 4.0), 360.0)

    # two-state rain chain on the 10-minute grid
    u = rng.child(5).uniform(n)
    raining = np.zeros(n, dtype=bool)
    state = False
    for j in range(n):
        state = (u[j] >= cfg.rain_stop_prob) if state else (u[j] < cfg.rain_start_prob)
        raining[j] = state
    precip = np.where(raining, 0.01 + rng.child(6).gen.exponential(0.1, n), 0.0)

    vis_noise = _ar1(rng.child(7), n, 0.995, 0.03)
    visibility = np.clip(30000.0 * np.exp(-0.8 * raining - np.abs(vis_noise)), 100.0, 50000.0)

    snow = np.zeros(n)
    depth = 0.0
    for j in range(n):
        if raining[j] and temp[j] < 0:
            depth += precip[j]
        elif temp[j] > 0:
            depth = max(0.0, depth - 0.02 * temp[j])
        snow[j] = depth

    values = np.column_stack([
        np.round(temp, 2), np.round(pressure, 1), np.round(wind, 2), np.round(gust, 2),
        np.round(wind_dir, 0), np.round(precip, 2), np.round(visibility, 0), np.round(snow, 1),
    ])
    return values


# --------------------------------------------------------------------------
# conditional law


def true_mixture_from_covariates(cfg: GeneratorConfig, aadct, hour, dtypes, mean_temp, rainy, snowy) -> MixtureParams:
    """Mixture over raw hourly volume for parallel arrays of hourly covariates."""
    aadct = np.asarray(aadct, dtype=np.float64)
    shapes = {d: hour_shape(d) for d in DAY_TYPES}
    share = np.array([shapes[d][int(h)] for d, h in zip(dtypes, hour)])
    dfac = np.array([DAY_TYPE_FACTOR[d] for d in dtypes])
    mult = np.exp(cfg.temp_effect * (np.asarray(mean_temp) - 10.0))
    mult = np.where(np.asarray(snowy, bool), mult * cfg.snow_factor, mult)
    mu1 = aadct * dfac * share * mult
    sd1 = cfg.noise_rel * mu1 + cfg.noise_abs
    if cfg.n_components == 1:
        var = np.maximum(sd1 * sd1, VAR_FLOOR)
        return MixtureParams(np.ones((len(mu1), 1)), mu1[:, None], var[:, None])
    mu2 = cfg.disrupted_ratio * mu1
    sd2 = cfg.noise_rel * mu2 + cfg.noise_abs
    a2 = np.where(np.asarray(rainy, bool), cfg.alpha_rain, cfg.alpha_dry)
    alpha = np.column_stack([1.0 - a2, a2])
    mu = np.column_stack([mu1, mu2])
    var = np.maximum(np.column_stack([sd1, sd2]) ** 2, VAR_FLOOR)
    return MixtureParams(alpha, mu, var)


def draw_counts(p: MixtureParams, rng: RngStream) -> tuple[np.ndarray, int]:
    """One draw per row of a batched mixture, truncated at zero.

    Returns (draws, number truncated).
    """
    n = p.alpha.shape[0]
    u = rng.child(0).uniform(n)
    comp = (u[:, None] >= np.cumsum(p.alpha, axis=1)[:, :-1]).sum(axis=1)
    z = rng.child(1).normal(n)
    rows = np.arange(n)
    y = p.mu[rows, comp] + np.sqrt(p.nu[rows, comp]) * z
    # exact draws when the variance sits at the floor
    y = np.where(p.nu[rows, comp] <= VAR_FLOOR, p.mu[rows, comp], y)
    neg = y < 0
    return np.where(neg, 0.0, y), int(neg.sum())


# --------------------------------------------------------------------------
# generate


@dataclass
class Panel:
    """In-memory result of `generate`; `write` materialises the CSV files."""

    cfg: GeneratorConfig
    minutes: np.ndarray
    weather: np.ndarray            # primary station, wind masked
    weather_fallback: np.ndarray
    counts: list                   # rows (station, hour_min, volume, aadct, aawct)
    crashes: np.ndarray            # (hours, 2): hour_min, count
    true_exposure: np.ndarray      # per crash hour
    holidays: list
    manifest: dict

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "weather": out / "weather.csv",
            "weather_fallback": out / "weather_fallback.csv",
            "counts": out / "counts.csv",
            "crashes": out / "crashes.csv",
            "holidays": out / "holidays.csv",
            "true_exposure": out / "exposure_true.csv",
            "factor_table": out / "factors_profile.csv",
            "manifest": out / "manifest.txt",
        }
        _write_weather(paths["weather"], self.minutes, self.weather)
        _write_weather(paths["weather_fallback"], self.minutes, self.weather_fallback)
        with open(paths["counts"], "w", newline="\n") as fh:
            fh.write("station_id,hour_utc,volume,aadct,aawct\n")
            for s, h, v, a, w in self.counts:
                fh.write(f"{s},{format_timestamp(h)},{v:.3f},{a:.1f},{w:.1f}\n")
        with open(paths["crashes"], "w", newline="\n") as fh:
            fh.write("hour_utc,crash_count\n")
            for h, c in self.crashes:
                fh.write(f"{format_timestamp(h)},{int(c)}\n")
        with open(paths["true_exposure"], "w", newline="\n") as fh:
            fh.write("hour_utc,exposure\n")
            for h, e in zip(self.crashes[:, 0], self.true_exposure):
                fh.write(f"{format_timestamp(h)},{e:.3f}\n")
        HolidayCalendar(self.holidays).to_csv(paths["holidays"])
        true_profile_table().to_csv(paths["factor_table"])
        write_manifest(self.manifest, paths["manifest"])
        return paths


def _write_weather(path, minutes, values) -> None:
    decimals = (2, 1, 2, 2, 0, 2, 0, 1)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(WEATHER_HEADER) + "\n")
        for m, row in zip(minutes, values):
            cells = ["" if np.isnan(v) else f"{v:.{d}f}" for v, d in zip(row, decimals)]
            fh.write(format_timestamp(m) + "," + ",".join(cells) + "\n")


def hourly_weather(minutes: np.ndarray, values: np.ndarray):
    """Collapse the 10-minute grid to hours: means, any-precip and any-snow."""
    n_hours = len(minutes) // 6
    v = values[: n_hours * 6].reshape(n_hours, 6, -1)
    idx = {f: j for j, f in enumerate(WEATHER_FIELDS)}
    with np.errstate(invalid="ignore"), np.testing.suppress_warnings() as sup:
        sup.filter(RuntimeWarning)
        wind = np.nanmean(v[..., idx["wind_ms"]], axis=1)
    return {
        "hour": minutes[: n_hours * 6: 6],
        "temp": v[..., idx["temp_c"]].mean(axis=1),
        "wind": wind,
        "visibility": v[..., idx["visibility_m"]].mean(axis=1),
        "precip": v[..., idx["precip_mm"]].sum(axis=1),
        "snow": v[..., idx["snow_cm"]].max(axis=1),
    }


def crash_rates(cfg: GeneratorConfig, cov: dict) -> tuple[float, np.ndarray]:
    """Calibrated intercept and hourly Poisson rates for the configured crash law."""
    eta = sum(cfg.crash_coef[name] * cov[name] for name in cfg.crash_coef)
    intercept = float(np.log(cfg.crash_rate * len(eta) / np.exp(eta).sum()))
    return intercept, np.exp(intercept + eta)


def generate(cfg: GeneratorConfig) -> Panel:
    start = dt.date.fromisoformat(cfg.start)
    start_min = parse_timestamp(start.isoformat() + "T00:00:00Z")
    minutes = start_min + 10 * np.arange(cfg.n_days * 144, dtype=np.int64)
    years = range(start.year, (start + dt.timedelta(days=cfg.n_days - 1)).year + 1)
    holidays = sorted(d for y in years for d in danish_holidays(y))
    hol = set(holidays)

    rng_w = RngStream(cfg.seed, STREAM_WEATHER)
    full = _weather(cfg, minutes, rng_w)

    # wind observations: primary loses whole days (mostly in winter), the
    # fallback sees a noisy version of the same wind with rarer gaps
    j_wind = WEATHER_FIELDS.index("wind_ms")
    rng_m = RngStream(cfg.seed, STREAM_MISSING)
    day_idx = (minutes - start_min) // 1440
    months = np.array([(start + dt.timedelta(days=int(d))).month for d in range(cfg.n_days)])
    winter = np.isin(months, (11, 12, 1, 2, 3))
    p_miss = np.where(winter, cfg.wind_missing_winter, cfg.wind_missing_summer)
    miss_day = rng_m.child(0).uniform(cfg.n_days) < p_miss
    primary = full.copy()
    primary[miss_day[day_idx], j_wind] = np.nan
    fallback = full.copy()
    fallback[:, j_wind] = np.round(np.clip(full[:, j_wind] * 0.9 + 0.3 * rng_m.child(1).normal(len(minutes)), 0, None), 2)
    fb_miss_day = rng_m.child(2).uniform(cfg.n_days) < cfg.fallback_missing
    fallback[fb_miss_day[day_idx], j_wind] = np.nan

    hw = hourly_weather(minutes, full)
    hours = hw["hour"]
    n_hours = len(hours)
    dates = [(start + dt.timedelta(days=int(d))) for d in (hours - start_min) // 1440]
    dtypes = [day_type(d.weekday(), d in hol) for d in dates]
    date_years = [d.year for d in dates]
    rainy = hw["precip"] > 0
    snowy = hw["snow"] > 0

    counts = []
    exposure = np.zeros(n_hours)
    truncated = 0
    rng_c = RngStream(cfg.seed, STREAM_COUNTS)
    for s, sid in enumerate(cfg.station_ids):
        per_year = {y: cfg.aadct(s, y) for y in years}
        aadct = np.array([per_year[y] for y in date_years])
        p = true_mixture_from_covariates(cfg, aadct, (hours % 1440) // 60, dtypes, hw["temp"], rainy, snowy)
        y, n_trunc = draw_counts(p, rng_c.child(s))
        y = np.round(y, 3)
        truncated += n_trunc
        exposure += y
        aawct = np.round(aadct * DAY_TYPE_FACTOR["weekday"], 1)
        counts.extend(zip([sid] * n_hours, hours.tolist(), y.tolist(), aadct.tolist(), aawct.tolist()))

    # crashes, from the realised city-wide exposure
    hflags = np.array([d in hol for d in dates], dtype=np.float64)
    cov = crash_covariates(hours, hw["temp"], hw["wind"], hw["visibility"], hw["precip"], hflags,
                           np.log(np.maximum(exposure, 1.0)))
    intercept, lam = crash_rates(cfg, cov)
    crashes = RngStream(cfg.seed, STREAM_CRASHES).gen.poisson(lam)

    manifest = config_to_manifest(cfg)
    manifest.update({
        "derived.crash_intercept": repr(intercept),
        "derived.n_hours": str(n_hours),
        "derived.truncated_draws": str(truncated),
        "derived.truncation_fraction": repr(truncated / (n_hours * len(cfg.station_ids))),
        "derived.mean_crash_rate": repr(float(lam.mean())),
    })
    for s, sid in enumerate(cfg.station_ids):
        for y in years:
            manifest[f"station.{sid}.aadct.{y}"] = repr(cfg.aadct(s, y))
    return Panel(cfg=cfg, minutes=minutes, weather=primary, weather_fallback=fallback, counts=counts,
                 crashes=np.column_stack([hours, crashes]), true_exposure=exposure,
                 holidays=holidays, manifest=manifest)


# --------------------------------------------------------------------------
# manifest


def config_to_manifest(cfg: GeneratorConfig) -> dict[str, str]:
    out = {"format": "bikeflow-synthetic-manifest 1"}
    for f in fields(GeneratorConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, dict):
            for k2 in sorted(v):
                out[f"config.{f.name}.{k2}"] = repr(float(v[k2]))
        elif isinstance(v, tuple):
            out[f"config.{f.name}"] = ",".join(repr(float(x)) for x in v)
        else:
            out[f"config.{f.name}"] = repr(v) if isinstance(v, float) else str(v)
    return out


def manifest_to_config(manifest: dict[str, str]) -> GeneratorConfig:
    if manifest.get("format") != "bikeflow-synthetic-manifest 1":
        raise ManifestError("not a synthetic manifest")
    kwargs = {}
    for f in fields(GeneratorConfig):
        key = f"config.{f.name}"
        if f.name == "crash_coef":
            kwargs[f.name] = {k[len(key) + 1:]: float(v) for k, v in manifest.items() if k.startswith(key + ".")}
            continue
        if key not in manifest:
            raise ManifestError(f"manifest lacks {key}")
        raw = manifest[key]
        if f.name == "station_aadct":
            kwargs[f.name] = tuple(float(x) for x in raw.split(","))
        elif f.type == "int":
            kwargs[f.name] = int(raw)
        elif f.type == "float":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return GeneratorConfig(**kwargs)


def write_manifest(manifest: dict[str, str], path) -> None:
    with open(path, "w", newline="\n") as fh:
        for k in sorted(manifest):
            fh.write(f"{k}={manifest[k]}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            k, sep, v = line.partition("=")
            if not sep:
                raise ManifestError(f"{path}: malformed line {line!r}")
            out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------
# oracle


def true_mixture(manifest: dict[str, str], raw: RawSamples) -> MixtureParams:
    """True conditional law (raw volume units) for assembled samples."""
    cfg = manifest_to_config(manifest)
    names = list(raw.feature_names)
    need = ("temp_c", "precip_mm", "snow_cm", "hour", "day_of_week", "holiday")
    missing = [c for c in need if c not in names]
    if missing:
        raise ManifestError(f"samples lack columns {missing} needed to evaluate the true law")
    col = {c: raw.X[:, :, names.index(c)] for c in need}
    sids = cfg.station_ids
    for s, h, a in zip(raw.station_id, raw.hour, raw.aadct):
        if s not in sids:
            raise ManifestError(f"station {s!r} is not part of the generating manifest")
    # AADCT must match the manifest's value for that station and year
    years = np.array([(dt.date(1970, 1, 1) + dt.timedelta(days=int(h // 1440))).year for h in raw.hour])
    expect = np.array([float(manifest.get(f"station.{s}.aadct.{y}", "nan")) for s, y in zip(raw.station_id, years)])
    if not np.allclose(expect, raw.aadct, rtol=0, atol=0.05):
        raise ManifestError("sample AADCT values do not match the manifest")
    dtypes = [day_type(int(w), bool(hf)) for w, hf in zip(col["day_of_week"][:, 0], col["holiday"][:, 0])]
    return true_mixture_from_covariates(
        cfg, raw.aadct, col["hour"][:, 0].astype(int), dtypes,
        col["temp_c"].mean(axis=1), (col["precip_mm"] > 0).any(axis=1), (col["snow_cm"] > 0).any(axis=1))


def true_nll(manifest: dict[str, str], raw: RawSamples) -> float:
    """Mean negative log density of the observed volumes under the true law."""
    p = true_mixture(manifest, raw)
    return float(-np.mean(mixture_log_density(raw.y, p)))
