"""Reference estimators: calibration-factor (SVF) profiles and a feed-forward MLP."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lstm import dropout_mask
from .numerics import DomainError, RngStream, ShapeError

DAY_TYPES = ("weekday", "saturday", "sunday-holiday")


class FactorTableError(ValueError):
    pass


# --------------------------------------------------------------------------
# calibration factors


@dataclass
class FactorTable:
    """Hour-of-day fractions of daily traffic per (month, day type)."""

    factors: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)

    def profile(self, month: int, day_type: str) -> np.ndarray:
        try:
            return self.factors[(month, day_type)]
        except KeyError:
            raise FactorTableError(f"no factor profile for month={month}, day_type={day_type}") from None

    def validate(self, tol: float = 1e-9) -> None:
        for (month, day_type), prof in self.factors.items():
            if prof.shape != (24,):
                raise FactorTableError(f"profile ({month}, {day_type}) does not have 24 hours")
            if np.any(prof < 0):
                raise FactorTableError(f"negative factor in profile ({month}, {day_type})")
            if abs(prof.sum() - 1.0) > tol:
                raise FactorTableError(
                    f"profile ({month}, {day_type}) sums to {prof.sum():.12g}, not 1")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["month", "day_type", "hour", "factor"])
            for (month, day_type) in sorted(self.factors, key=lambda k: (k[0], DAY_TYPES.index(k[1]))):
                for hour, f in enumerate(self.factors[(month, day_type)]):
                    out.writerow([month, day_type, hour, repr(float(f))])


def uniform_factor_table() -> FactorTable:
    """Flat profile: every hour carries 1/24 of the day."""
    flat = np.full(24, 1.0 / 24.0)
    return FactorTable({(m, d): flat.copy() for m in range(1, 13) for d in DAY_TYPES})


def profile_factor_table(shapes: dict[str, np.ndarray]) -> FactorTable:
    """Same normalised hour profile for every month, one shape per day type."""
    table = {}
    for d in DAY_TYPES:
        prof = np.asarray(shapes[d], dtype=np.float64)
        prof = prof / prof.sum()
        for m in range(1, 13):
            table[(m, d)] = prof.copy()
    return FactorTable(table)


def load_factor_table(path) -> FactorTable:
    rows: dict[tuple[int, str], dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["month", "day_type", "hour", "factor"]:
            raise FactorTableError(f"{path}: expected header month,day_type,hour,factor, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                month, day_type, hour, factor = int(row[0]), row[1].strip(), int(row[2]), float(row[3])
            except (ValueError, IndexError):
                raise FactorTableError(f"{path}:{lineno}: malformed row {row}") from None
            if not 1 <= month <= 12 or day_type not in DAY_TYPES or not 0 <= hour <= 23:
                raise FactorTableError(f"{path}:{lineno}: key out of range {row}")
            prof = rows.setdefault((month, day_type), {})
            if hour in prof:
                raise FactorTableError(f"{path}:{lineno}: duplicate row for ({month}, {day_type}, {hour})")
            prof[hour] = factor
    table = {}
    for key, prof in rows.items():
        if len(prof) != 24:
            raise FactorTableError(f"profile {key} has {len(prof)} hours, expected 24")
        table[key] = np.array([prof[h] for h in range(24)])
    ft = FactorTable(table)
    ft.validate()
    return ft


def day_type(weekday: int, holiday: bool) -> str:
    """weekday: Monday=0 .. Sunday=6."""
    if holiday or weekday == 6:
        return "sunday-holiday"
    return "saturday" if weekday == 5 else "weekday"


def svf_estimate(daily_volume, month: int, dtype: str, hour, table: FactorTable):
    """Hourly volume = daily volume x factor(month, day type, hour)."""
    prof = table.profile(month, dtype)
    return np.asarray(daily_volume, dtype=np.float64) * prof[hour]


def svf_estimates(aadct, aawct, months, weekdays, holidays, hours, table: FactorTable,
                  weekday_uses_aawct: bool = True) -> np.ndarray:
    """Vectorised svf_estimate over parallel arrays of hourly records."""
    n = len(hours)
    out = np.empty(n)
    for j in range(n):
        dt = day_type(int(weekdays[j]), bool(holidays[j]))
        daily = aawct[j] if (weekday_uses_aawct and dt == "weekday") else aadct[j]
        out[j] = daily * table.profile(int(months[j]), dt)[int(hours[j])]
    return out


def write_svf_estimates(path, station_ids, hours_utc, estimates) -> None:
    """CSV `station_id,hour_utc,estimate`; hours are ISO-8601 strings."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["station_id", "hour_utc", "estimate"])
        for s, h, e in zip(station_ids, hours_utc, estimates):
            out.writerow([s, h, "%.6f" % e])


# --------------------------------------------------------------------------
# MLP


MLP_WIDTH = 258
MLP_LAYERS = 3


def elu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    # derivative 1 taken at x == 0
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


def mlp_shapes(n_in: int, width: int = MLP_WIDTH, layers: int = MLP_LAYERS) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = n_in
    for l in range(1, layers + 1):
        shapes[f"W{l}"] = (prev, width)
        shapes[f"b{l}"] = (width,)
        prev = width
    shapes["W_out"] = (prev, 1)
    shapes["b_out"] = (1,)
    return shapes


def init_mlp(n_in: int, rng: RngStream, width: int = MLP_WIDTH, layers: int = MLP_LAYERS):
    w = {}
    for name, shape in mlp_shapes(n_in, width, layers).items():
        if name.startswith("b"):
            w[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            w[name] = rng.gen.uniform(-bound, bound, size=shape)
    return w


def _n_layers(w) -> int:
    return sum(1 for name in w if name.startswith("W") and name != "W_out")


def mlp_forward(x, w: dict, mode: str = "infer", rng: RngStream | None = None,
                dropout: float = 0.2, return_cache: bool = False):
    """Flattened sequence(s) -> standardized flow estimate(s).

    `x` is (n_in,) or (B, n_in).  Train mode applies inverted dropout after
    every hidden ELU layer.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[1] != w["W1"].shape[0]:
        raise ShapeError(f"input length {x.shape[1]} != {w['W1'].shape[0]}")
    if mode not in ("train", "infer"):
        raise DomainError(f"unknown mode {mode!r}")
    cache = {"x": x, "pre": [], "act": [], "masks": []}
    a = x
    for l in range(1, _n_layers(w) + 1):
        z = a @ w[f"W{l}"] + w[f"b{l}"]
        a = elu(z)
        mask = None
        if mode == "train" and dropout > 0:
            if rng is None:
                raise DomainError("train-mode dropout needs an RngStream")
            mask = dropout_mask(a.shape, dropout, rng)
            a = a * mask
        cache["pre"].append(z)
        cache["act"].append(a)
        cache["masks"].append(mask)
    out = (a @ w["W_out"] + w["b_out"])[:, 0]
    if single:
        out = float(out[0])
    return (out, cache) if return_cache else out


def mlp_backward(cache, dout, w: dict):
    """Gradients given d(loss)/d(output) per sample; returns (grads, dx)."""
    dout = np.atleast_1d(np.asarray(dout, dtype=np.float64))[:, None]
    n_layers = len(cache["pre"])
    grads = {}
    a_last = cache["act"][-1]
    grads["W_out"] = a_last.T @ dout
    grads["b_out"] = dout.sum(axis=0)
    da = dout @ w["W_out"].T
    for l in range(n_layers, 0, -1):
        mask = cache["masks"][l - 1]
        if mask is not None:
            da = da * mask
        dz = da * elu_grad(cache["pre"][l - 1])
        a_in = cache["x"] if l == 1 else cache["act"][l - 2]
        grads[f"W{l}"] = a_in.T @ dz
        grads[f"b{l}"] = dz.sum(axis=0)
        da = dz @ w[f"W{l}"].T
    return {name: grads[name] for name in w}, da


def param_count_mlp(n_in: int, width: int = MLP_WIDTH, layers: int = MLP_LAYERS) -> int:
    return n_in * width + width + (layers - 1) * (width * width + width) + width + 1
