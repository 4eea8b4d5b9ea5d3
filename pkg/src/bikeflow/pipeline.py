"""CSV ingestion, wind imputation, temporal encoding and sequence assembly.

Weather is held column-wise (`WeatherTable`) rather than as a list of row
objects; a year of 10-minute data is ~50k rows and every later step is a
vectorised lookup on the timestamp column.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import DomainError

logger = logging.getLogger(__name__)

WEATHER_HEADER = ["timestamp", "temp_c", "pressure_hpa", "wind_ms", "gust_ms",
                  "wind_dir_deg", "precip_mm", "visibility_m", "snow_cm"]
WEATHER_FIELDS = WEATHER_HEADER[1:]
COUNTS_HEADER = ["station_id", "hour_utc", "volume", "aadct", "aawct"]
STEPS_PER_HOUR = 6

# Replication column roster, 18 per 10-minute step.
DEFAULT_FEATURES = (
    "temp_c", "pressure_hpa", "wind_ms", "gust_ms", "wind_dir_deg", "precip_mm",
    "visibility_m", "snow_cm", "slot",
    "hour", "day_of_week", "week_of_year", "holiday",
    "aadct",
    "wind_dir_sin", "wind_dir_cos", "wind_imputed", "wind_missing",
)
# features that may legitimately be missing after imputation; filled with the
# training mean (0 after standardization) and flagged by `wind_missing`
NULLABLE_FEATURES = ("wind_ms",)

_EPOCH = dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)


class DataError(ValueError):
    pass


class CalendarRangeError(DataError, DomainError):
    """Date outside the years covered by the holiday calendar."""


class StandardizationError(ValueError):
    pass


# --------------------------------------------------------------------------
# timestamps


def parse_timestamp(text: str) -> int:
    """ISO-8601 timestamp -> minutes since the Unix epoch (UTC).

    Naive timestamps are taken as UTC.
    """
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    t = dt.datetime.fromisoformat(s)
    if t.tzinfo is None:
        t = t.replace(tzinfo=dt.timezone.utc)
    delta = t - _EPOCH
    if delta.seconds % 60 or delta.microseconds:
        raise ValueError(f"timestamp {text!r} is not minute-aligned")
    return delta.days * 1440 + delta.seconds // 60


def format_timestamp(minutes: int) -> str:
    t = _EPOCH + dt.timedelta(minutes=int(minutes))
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def to_datetime(minutes: int) -> dt.datetime:
    return _EPOCH + dt.timedelta(minutes=int(minutes))


# --------------------------------------------------------------------------
# records


@dataclass
class WeatherTable:
    """10-minute weather observations, sorted by timestamp.

    `values` is (n, 8) in WEATHER_FIELDS order; NaN marks a missing cell.
    """

    minutes: np.ndarray
    values: np.ndarray
    wind_imputed: np.ndarray = None
    wind_missing: np.ndarray = None

    def __post_init__(self):
        n = len(self.minutes)
        if self.wind_imputed is None:
            self.wind_imputed = np.zeros(n, dtype=bool)
        if self.wind_missing is None:
            self.wind_missing = np.isnan(self.values[:, WEATHER_FIELDS.index("wind_ms")])

    def __len__(self) -> int:
        return len(self.minutes)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, WEATHER_FIELDS.index(name)]

    def index_of(self, minutes) -> np.ndarray:
        """Row index for each timestamp, -1 where absent."""
        minutes = np.asarray(minutes)
        if len(self.minutes) == 0:
            return np.full(minutes.shape, -1, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.minutes, minutes), 0, len(self.minutes) - 1)
        return np.where(self.minutes[pos] == minutes, pos, -1)


@dataclass
class CountTable:
    station_id: np.ndarray   # str objects
    hour: np.ndarray         # minutes since epoch, hour aligned
    volume: np.ndarray
    aadct: np.ndarray
    aawct: np.ndarray

    def __len__(self) -> int:
        return len(self.hour)


def _float_cell(cell: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() == "nan":
        return np.nan
    return float(cell)


def load_weather(path) -> WeatherTable:
    minutes, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != WEATHER_HEADER:
            raise DataError(f"{path}: expected header {','.join(WEATHER_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(WEATHER_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(WEATHER_HEADER)} fields, got {len(row)}")
            try:
                m = parse_timestamp(row[0])
                vals = [_float_cell(c) for c in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if m % 10:
                raise DataError(f"{path}:{lineno}: timestamp {row[0]} not on the 10-minute grid")
            vis, precip = vals[WEATHER_FIELDS.index("visibility_m")], vals[WEATHER_FIELDS.index("precip_mm")]
            if vis < 0 or precip < 0:
                raise DataError(f"{path}:{lineno}: negative visibility or precipitation")
            minutes.append(m)
            rows.append(vals)
    minutes = np.array(minutes, dtype=np.int64)
    values = np.array(rows, dtype=np.float64).reshape(-1, len(WEATHER_FIELDS))
    order = np.argsort(minutes, kind="stable")
    minutes, values = minutes[order], values[order]
    dup = np.flatnonzero(np.diff(minutes) == 0)
    if dup.size:
        raise DataError(f"{path}: duplicate timestamp {format_timestamp(minutes[dup[0]])}")
    return WeatherTable(minutes, values)


def load_counts(path) -> CountTable:
    cols = {name: [] for name in COUNTS_HEADER}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != COUNTS_HEADER:
            raise DataError(f"{path}: expected header {','.join(COUNTS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(COUNTS_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(COUNTS_HEADER)} fields, got {len(row)}")
            try:
                station = row[0].strip()
                hour = parse_timestamp(row[1])
                volume, aadct, aawct = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if hour % 60:
                raise DataError(f"{path}:{lineno}: hour_utc {row[1]} is not on the hour")
            if not np.isfinite(volume) or volume < 0 or aadct <= 0 or aawct <= 0:
                raise DataError(f"{path}:{lineno}: volume must be >= 0 and AADCT/AAWCT > 0")
            for name, v in zip(COUNTS_HEADER, (station, hour, volume, aadct, aawct)):
                cols[name].append(v)
    return CountTable(
        station_id=np.array(cols["station_id"], dtype=object),
        hour=np.array(cols["hour_utc"], dtype=np.int64),
        volume=np.array(cols["volume"], dtype=np.float64),
        aadct=np.array(cols["aadct"], dtype=np.float64),
        aawct=np.array(cols["aawct"], dtype=np.float64),
    )


def load_holidays(path) -> "HolidayCalendar":
    dates = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["date"]:
            raise DataError(f"{path}: expected header 'date'")
        for lineno, row in enumerate(reader, start=2):
            if not row or not row[0].strip():
                continue
            try:
                dates.append(dt.date.fromisoformat(row[0].strip()))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return HolidayCalendar(dates)


# --------------------------------------------------------------------------
# imputation


def impute_wind(primary: WeatherTable, fallback: WeatherTable) -> WeatherTable:
    """Fill missing primary wind speed from the fallback station's same timestamp.

    Observed primary values are never overwritten; rows missing at both
    stations stay missing and are flagged in `wind_missing`.
    """
    j = WEATHER_FIELDS.index("wind_ms")
    values = primary.values.copy()
    wind = values[:, j]
    idx = fallback.index_of(primary.minutes)
    fb = np.where(idx >= 0, fallback.values[np.maximum(idx, 0), j], np.nan)
    fill = np.isnan(wind) & ~np.isnan(fb)
    wind[fill] = fb[fill]
    missing = np.isnan(wind)
    logger.info("wind imputation: %d filled from fallback, %d still missing", fill.sum(), missing.sum())
    return WeatherTable(primary.minutes.copy(), values,
                        wind_imputed=primary.wind_imputed | fill, wind_missing=missing)


# --------------------------------------------------------------------------
# temporal features


@dataclass
class HolidayCalendar:
    dates: list

    def __post_init__(self):
        self._set = set(self.dates)
        years = [d.year for d in self.dates]
        self.first_year = min(years) if years else None
        self.last_year = max(years) if years else None

    def covers(self, year: int) -> bool:
        return self.first_year is not None and self.first_year <= year <= self.last_year

    def is_holiday(self, day: dt.date) -> bool:
        if not self.covers(day.year):
            raise CalendarRangeError(f"holiday calendar does not cover {day.year}")
        return day in self._set

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("date\n")
            for d in sorted(self._set):
                fh.write(d.isoformat() + "\n")


def encode_temporal(when, calendar: HolidayCalendar) -> tuple[int, int, int, int]:
    """(hour 0-23, day of week Monday=0, ISO week 1-53, holiday 0/1)."""
    if not isinstance(when, dt.datetime):
        when = to_datetime(when)
    return when.hour, when.weekday(), when.isocalendar()[1], int(calendar.is_holiday(when.date()))


# --------------------------------------------------------------------------
# assembly


@dataclass
class StandardizationStats:
    feature_names: tuple
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float

    def apply(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.feature_mean) / self.feature_std
        # nullable cells fall back to the training mean
        return np.where(np.isnan(Z), 0.0, Z)

    def apply_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def invert_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_std + self.target_mean


def fit_standardization(X_raw, y_raw, feature_names=DEFAULT_FEATURES) -> StandardizationStats:
    """Per-feature z-score statistics over all rows and steps of the given samples."""
    X = np.asarray(X_raw, dtype=np.float64)
    y = np.asarray(y_raw, dtype=np.float64)
    if X.shape[0] == 0:
        raise StandardizationError("cannot fit standardization on an empty training split")
    flat = X.reshape(-1, X.shape[-1])
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(flat, axis=0)
        std = np.nanstd(flat, axis=0)
    for j, name in enumerate(feature_names):
        if not np.isfinite(std[j]) or std[j] <= 0:
            raise StandardizationError(f"feature {name!r} has zero variance on the training split")
    y_std = float(np.std(y))
    if y_std <= 0:
        raise StandardizationError("target has zero variance on the training split")
    return StandardizationStats(tuple(feature_names), mean, std, float(np.mean(y)), y_std)


@dataclass
class RawSamples:
    """Unstandardized sequence samples plus bookkeeping."""

    X: np.ndarray                 # (N, 6, D), NaN only in nullable columns
    y: np.ndarray                 # (N,) hourly volume
    station_id: np.ndarray
    hour: np.ndarray              # minutes since epoch
    aadct: np.ndarray
    aawct: np.ndarray
    feature_names: tuple
    dropped: list = field(default_factory=list)   # (station_id, hour, reason)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "RawSamples":
        idx = np.asarray(idx)
        return RawSamples(self.X[idx], self.y[idx], self.station_id[idx], self.hour[idx],
                          self.aadct[idx], self.aawct[idx], self.feature_names, [])


@dataclass
class SequenceSamples:
    """Standardized samples ready for a network: X is (N, 6, D), y is (N,)."""

    X: np.ndarray
    y: np.ndarray
    station_id: np.ndarray
    hour: np.ndarray
    raw: RawSamples

    def __len__(self) -> int:
        return len(self.y)


def _temporal_columns(hours_min: np.ndarray, calendar: HolidayCalendar):
    """Vectorised temporal encoding over unique days."""
    days = hours_min // 1440
    out = np.empty((len(hours_min), 4))
    out[:, 0] = (hours_min % 1440) // 60
    cache = {}
    for n, d in enumerate(days):
        if d not in cache:
            day = (_EPOCH + dt.timedelta(days=int(d))).date()
            cache[d] = (day.weekday(), day.isocalendar()[1], int(calendar.is_holiday(day)))
        out[n, 1:] = cache[d]
    return out


def build_raw_samples(weather: WeatherTable, counts: CountTable, calendar: HolidayCalendar,
                      feature_names=DEFAULT_FEATURES) -> RawSamples:
    """Pair every counted hour with its six [T, T+1) weather rows.

    Hours with any required weather cell missing or fewer than six rows are
    dropped and recorded.  Output is ordered by (station id, hour).
    """
    order = sorted(range(len(counts)), key=lambda j: (counts.station_id[j], counts.hour[j]))
    order = np.array(order, dtype=np.int64)
    hours = counts.hour[order]
    stations = counts.station_id[order]

    steps = hours[:, None] + 10 * np.arange(STEPS_PER_HOUR)[None, :]
    idx = weather.index_of(steps)
    present = idx >= 0
    safe = np.maximum(idx, 0)
    vals = weather.values[safe]                                # (N, 6, 8)
    required = [j for j, f in enumerate(WEATHER_FIELDS) if f not in NULLABLE_FEATURES]
    clean = present & ~np.isnan(vals[..., required]).any(axis=-1)
    keep = clean.all(axis=1)

    dropped = []
    for j in np.flatnonzero(~keep):
        reason = "missing_rows" if not present[j].all() else "missing_values"
        dropped.append((stations[j], int(hours[j]), reason))
    if dropped:
        logger.info("dropped %d of %d hours with incomplete weather", len(dropped), len(hours))

    sel = order[keep]
    hours, stations, idx = hours[keep], stations[keep], safe[keep]
    vals = vals[keep]
    n = len(sel)
    temporal = _temporal_columns(hours, calendar)
    wd = np.deg2rad(vals[..., WEATHER_FIELDS.index("wind_dir_deg")])
    columns = {name: vals[..., j] for j, name in enumerate(WEATHER_FIELDS)}
    columns.update(
        slot=np.broadcast_to(np.arange(STEPS_PER_HOUR, dtype=np.float64), (n, STEPS_PER_HOUR)),
        hour=np.repeat(temporal[:, 0:1], STEPS_PER_HOUR, axis=1),
        day_of_week=np.repeat(temporal[:, 1:2], STEPS_PER_HOUR, axis=1),
        week_of_year=np.repeat(temporal[:, 2:3], STEPS_PER_HOUR, axis=1),
        holiday=np.repeat(temporal[:, 3:4], STEPS_PER_HOUR, axis=1),
        aadct=np.repeat(counts.aadct[sel][:, None], STEPS_PER_HOUR, axis=1),
        aawct=np.repeat(counts.aawct[sel][:, None], STEPS_PER_HOUR, axis=1),
        wind_dir_sin=np.sin(wd),
        wind_dir_cos=np.cos(wd),
        wind_imputed=weather.wind_imputed[idx].astype(np.float64),
        wind_missing=weather.wind_missing[idx].astype(np.float64),
    )
    unknown = [f for f in feature_names if f not in columns]
    if unknown:
        raise DataError(f"unknown feature columns {unknown}")
    X = np.stack([np.asarray(columns[f], dtype=np.float64) for f in feature_names], axis=-1)
    return RawSamples(X=X, y=counts.volume[sel], station_id=stations, hour=hours,
                      aadct=counts.aadct[sel], aawct=counts.aawct[sel],
                      feature_names=tuple(feature_names), dropped=dropped)


def assemble_sequences(raw: RawSamples, stats: StandardizationStats) -> SequenceSamples:
    if tuple(stats.feature_names) != tuple(raw.feature_names):
        raise StandardizationError("standardization stats were fitted on a different feature roster")
    return SequenceSamples(X=stats.apply(raw.X), y=stats.apply_target(raw.y),
                           station_id=raw.station_id, hour=raw.hour, raw=raw)


def write_drop_report(dropped, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["station_id", "hour_utc", "reason"])
        for station, hour, reason in dropped:
            out.writerow([station, format_timestamp(hour), reason])
