"""Command-line entry point: synth, ingest, train, evaluate, compare, crash.

Configuration is a flat key=value file with section prefixes (``data.counts``,
``model.k``, ``train.max_epochs`` ...).  Relative paths resolve against the
config file's directory.  Every command writes ``run_manifest.txt`` next to
its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__, crash, evaluation, mdn, models, pipeline, synthetic, training
from .baselines import (FactorTableError, load_factor_table, svf_estimates, uniform_factor_table,
                        write_svf_estimates)
from .numerics import DomainError, RngStream, ShapeError

log = logging.getLogger("bikeflow")

STREAM_EVAL = 5

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

PATH_KEYS = {
    "data.weather", "data.weather_fallback", "data.counts", "data.holidays", "data.factor_table",
    "eval.model", "crash.crashes",
}
KNOWN = {
    "seed", "eval.draws", "eval.model", "compare.models", "compare.heat_bins", "compare.series_station",
    "compare.series_start", "compare.series_hours", "compare.exposure_model", "compare.weekday_uses_aawct",
    "crash.crashes", "crash.exposures",
} | PATH_KEYS
SECTIONS = {
    "synth": synthetic.GeneratorConfig,
    "model": models.ModelConfig,
    "train": training.TrainConfig,
}


class CliConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


class Config(dict):
    """Resolved key=value settings; `written` keeps the values as they appear in the file."""

    def __init__(self):
        super().__init__()
        self.written = {}


def read_config(path) -> Config:
    cfg = Config()
    base = Path(path).resolve().parent
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliConfigError(f"cannot read config {path}: {e.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise CliConfigError(f"{path}:{lineno}: expected key=value")
        if key in cfg:
            raise CliConfigError(f"{path}:{lineno}: duplicate key {key}")
        section = key.split(".", 1)[0]
        if key not in KNOWN and section not in SECTIONS:
            raise CliConfigError(f"{path}:{lineno}: unknown key {key}")
        cfg.written[key] = value
        if key in PATH_KEYS:
            value = str(base / value)
        elif key == "compare.models":
            value = ",".join(str(base / v.strip()) for v in value.split(","))
        elif key == "crash.exposures":
            value = ",".join(f"{lab.strip()}:{base / p.strip()}" for lab, _, p in
                             (item.partition(":") for item in value.split(",")))
        cfg[key] = value
    return cfg


def _section(cfg: dict, section: str, cls, **extra):
    """Instantiate a config dataclass from `section.*` keys."""
    kwargs = dict(extra)
    names = {f.name: f for f in fields(cls)}
    for key, raw in cfg.items():
        if not key.startswith(section + "."):
            continue
        name = key[len(section) + 1:]
        if section == "synth" and name.startswith("crash_coef."):
            coef = kwargs.setdefault("crash_coef", dict(cls().crash_coef))
            coef[name[len("crash_coef."):]] = _num(float, raw, key)
            continue
        if name not in names:
            raise CliConfigError(f"unknown key {key}")
        typ = names[name].type
        if name == "station_aadct":
            kwargs[name] = tuple(_num(float, v, key) for v in raw.split(","))
        elif typ == "int":
            kwargs[name] = _num(int, raw, key)
        elif typ == "float":
            kwargs[name] = _num(float, raw, key)
        else:
            kwargs[name] = raw
    try:
        return cls(**kwargs)
    except (TypeError, models.ConfigError, DomainError) as e:
        raise CliConfigError(f"invalid {section} configuration: {e}") from None


def _num(conv, raw, key):
    try:
        return conv(raw)
    except ValueError:
        raise CliConfigError(f"{key}: cannot parse {raw!r} as {conv.__name__}") from None


def _need(cfg: dict, key: str) -> str:
    if key not in cfg:
        raise CliConfigError(f"missing config key {key}")
    if key in PATH_KEYS and not Path(cfg[key]).exists():
        raise CliConfigError(f"{key}: file not found: {cfg[key]}")
    return cfg[key]


def config_hash(cfg: dict) -> str:
    cfg = getattr(cfg, "written", cfg)
    text = "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))
    return hashlib.sha256(text.encode()).hexdigest()


def write_run_manifest(out: Path, command: str, cfg: dict, outputs: list[Path]) -> None:
    lines = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed", ""),
        "version.bikeflow": __version__,
        "version.numpy": np.__version__,
        "version.scipy": scipy.__version__,
        "version.python": platform.python_version(),
    }
    written = getattr(cfg, "written", cfg)
    for k in sorted(written):
        lines[f"config.{k}"] = written[k]
    for p in sorted(outputs):
        lines[f"output.{p.name}.sha256"] = hashlib.sha256(p.read_bytes()).hexdigest()
    with open(out / "run_manifest.txt", "w", newline="\n") as fh:
        for k, v in lines.items():
            fh.write(f"{k}={v}\n")


# --------------------------------------------------------------------------
# shared data plumbing


def load_raw(cfg: dict) -> pipeline.RawSamples:
    weather = pipeline.load_weather(_need(cfg, "data.weather"))
    if "data.weather_fallback" in cfg:
        weather = pipeline.impute_wind(weather, pipeline.load_weather(_need(cfg, "data.weather_fallback")))
    counts = pipeline.load_counts(_need(cfg, "data.counts"))
    calendar = pipeline.load_holidays(_need(cfg, "data.holidays"))
    return pipeline.build_raw_samples(weather, counts, calendar)


def split_samples(raw: pipeline.RawSamples, seed: int, stats=None):
    sp = training.split_dataset(len(raw), seed)
    if stats is None:
        tr = raw.subset(sp.train)
        stats = pipeline.fit_standardization(tr.X, tr.y, raw.feature_names)
    parts = [pipeline.assemble_sequences(raw.subset(idx), stats) for idx in (sp.train, sp.validation, sp.test)]
    return stats, parts


def _seed(cfg: dict) -> int:
    return _num(int, _need(cfg, "seed"), "seed")


def _factor_table(cfg: dict):
    if "data.factor_table" in cfg:
        return load_factor_table(_need(cfg, "data.factor_table"))
    return uniform_factor_table()


def _svf_raw(raw: pipeline.RawSamples, table, weekday_uses_aawct: bool) -> np.ndarray:
    names = list(raw.feature_names)
    when = [pipeline.to_datetime(int(h)) for h in raw.hour]
    holidays = raw.X[:, 0, names.index("holiday")]
    return svf_estimates(raw.aadct, raw.aawct, [t.month for t in when], [t.weekday() for t in when],
                         holidays, [t.hour for t in when], table, weekday_uses_aawct)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, out: Path) -> list[Path]:
    gen = _section(cfg, "synth", synthetic.GeneratorConfig, seed=_seed(cfg))
    panel = synthetic.generate(gen)
    paths = panel.write(out)
    log.info("synthetic panel: %d count rows, %d crash hours", len(panel.counts), len(panel.crashes))
    return list(paths.values())


def cmd_ingest(cfg: dict, out: Path) -> list[Path]:
    raw = load_raw(cfg)
    drops = out / "drops.csv"
    pipeline.write_drop_report(raw.dropped, drops)
    summary = out / "ingest_summary.csv"
    stations, n = np.unique(raw.station_id, return_counts=True)
    dropped_by = {}
    for s, _, _ in raw.dropped:
        dropped_by[s] = dropped_by.get(s, 0) + 1
    with open(summary, "w", newline="\n") as fh:
        fh.write("station_id,samples,dropped\n")
        for s in sorted(set(stations.tolist()) | set(dropped_by)):
            fh.write(f"{s},{int(n[stations == s].sum())},{dropped_by.get(s, 0)}\n")
        fh.write(f"total,{len(raw)},{len(raw.dropped)}\n")
    log.info("ingest: %d samples, %d hours dropped", len(raw), len(raw.dropped))
    return [drops, summary]


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    seed = _seed(cfg)
    mcfg = _section(cfg, "model", models.ModelConfig)
    tcfg = _section(cfg, "train", training.TrainConfig, seed=seed)
    raw = load_raw(cfg)
    if raw.X.shape[2] != mcfg.D or raw.X.shape[1] != mcfg.S:
        raise CliConfigError(f"model expects S={mcfg.S}, D={mcfg.D}; data has S={raw.X.shape[1]}, D={raw.X.shape[2]}")
    stats, (tr, va, _) = split_samples(raw, seed)
    model = training.train(mcfg, tcfg, (tr.X, tr.y), (va.X, va.y), stats=stats)
    log.info("trained %s: best epoch %d of %d", mcfg.architecture, model.best_epoch, len(model.history))
    paths = [out / "model.txt", out / "history.csv"]
    training.save_model(model, paths[0])
    training.write_history(model, paths[1])
    return paths


def _draws(cfg: dict) -> int:
    return _num(int, cfg.get("eval.draws", str(evaluation.N_DRAWS)), "eval.draws")


def cmd_evaluate(cfg: dict, out: Path) -> list[Path]:
    seed = _seed(cfg)
    model = training.load_model(_need(cfg, "eval.model"))
    raw = load_raw(cfg)
    _, (_, _, te) = split_samples(raw, seed, model.stats)
    report = evaluation.evaluate(model, te, RngStream(seed, STREAM_EVAL), n_draws=_draws(cfg))
    paths = [out / "gof.csv", out / "gof.txt"]
    evaluation.write_reports([report], paths[0])
    paths[1].write_text(evaluation.format_reports([report]))
    return paths


def _series_start(samples, station, n_hours: int) -> int:
    """First Monday 00:00 UTC opening a gap-free window, else the first gap-free window."""
    hours = np.sort(samples.hour[samples.station_id == station])
    have = set(hours.tolist())
    fallback = None
    for h in hours:
        h = int(h)
        if all(h + 60 * j in have for j in range(n_hours)):
            if pipeline.to_datetime(h).weekday() == 0 and h % 1440 == 0:
                return h
            if fallback is None:
                fallback = h
    if fallback is None:
        raise evaluation.WindowGapError(f"station {station}: no gap-free window of {n_hours} hours")
    return fallback


def cmd_compare(cfg: dict, out: Path) -> list[Path]:
    seed = _seed(cfg)
    paths_in = [p for p in _need(cfg, "compare.models").split(",") if p]
    for p in paths_in:
        if not Path(p).exists():
            raise CliConfigError(f"compare.models: file not found: {p}")
    trained = [training.load_model(p) for p in paths_in]
    table = _factor_table(cfg)
    wd_aawct = cfg.get("compare.weekday_uses_aawct", "true").lower() in ("1", "true", "yes")
    n_bins = _num(int, cfg.get("compare.heat_bins", "20"), "compare.heat_bins")
    n_hours = _num(int, cfg.get("compare.series_hours", "148"), "compare.series_hours")
    draws = _draws(cfg)
    raw = load_raw(cfg)
    rng = RngStream(seed, STREAM_EVAL)
    written = []

    reports = []
    base_stats = trained[0].stats if trained else None
    stats, (_, va, te) = split_samples(raw, seed, base_stats)
    for j, model in enumerate(trained):
        if model.stats is None:
            raise CliConfigError(f"{paths_in[j]}: model file carries no standardization statistics")
        _, (_, _, te_j) = split_samples(raw, seed, model.stats)
        rep = evaluation.evaluate(model, te_j, rng, n_draws=draws)
        reports.append(rep)
        hb = evaluation.heat_bins(te_j.y, rep.estimates, n_bins)
        p = out / f"heat_{j + 1}.csv"
        hb.to_csv(p)
        written.append(p)

    # flat-profile baseline on the same test samples
    svf_va = stats.apply_target(_svf_raw(va.raw, table, wd_aawct))
    svf_te = stats.apply_target(_svf_raw(te.raw, table, wd_aawct))
    resid = float(np.mean((svf_va - va.y) ** 2)) if len(va) else 1.0
    svf_rep = evaluation.point_report("SVF", svf_te, te.y, resid)
    reports.append(svf_rep)
    hb = evaluation.heat_bins(te.y, svf_te, n_bins)
    written.append(out / "heat_svf.csv")
    hb.to_csv(written[-1])

    p_csv, p_txt = out / "comparison.csv", out / "comparison.txt"
    evaluation.write_reports(reports, p_csv)
    lines = [evaluation.format_reports(reports), ""]
    for r in reports[:-1]:
        lines.append(f"{r.model_id}: MSE_mu improvement over SVF "
                     f"{evaluation.improvement_pct(r.mse_mu, svf_rep.mse_mu):.1f}%")
    p_txt.write_text("\n".join(lines) + "\n")
    written += [p_csv, p_txt]

    # weekly series over all samples of one station
    if trained:
        all_seq = pipeline.assemble_sequences(raw, trained[0].stats)
        station = cfg.get("compare.series_station", str(np.unique(raw.station_id)[0]))
        if "compare.series_start" in cfg:
            start = pipeline.parse_timestamp(cfg["compare.series_start"])
        else:
            start = _series_start(all_seq, station, n_hours)
        for j, model in enumerate(trained):
            seq = pipeline.assemble_sequences(raw, model.stats)
            rows = evaluation.weekly_series(model, seq, station, start, rng, table, n_hours=n_hours,
                                            n_draws=draws, weekday_uses_aawct=wd_aawct)
            p = out / f"series_{j + 1}.csv"
            evaluation.write_series(rows, p)
            written.append(p)

    # city-wide exposure series for the crash model
    svf_all = _svf_raw(raw, table, wd_aawct)
    p = out / "svf_estimates.csv"
    write_svf_estimates(p, raw.station_id, [pipeline.format_timestamp(int(h)) for h in raw.hour], svf_all)
    written.append(p)
    for name, ser in (("svf", crash.aggregate_exposure(raw.station_id, raw.hour, svf_all)),
                      ("aawct", crash.aawct_exposure(raw.station_id, raw.hour, raw.aawct))):
        p = out / f"exposure_{name}.csv"
        ser.complete().to_csv(p)
        written.append(p)
    if trained:
        k = _num(int, cfg.get("compare.exposure_model", "1"), "compare.exposure_model")
        if not 1 <= k <= len(trained):
            raise CliConfigError(f"compare.exposure_model must lie in 1..{len(trained)}")
        model = trained[k - 1]
        seq = pipeline.assemble_sequences(raw, model.stats)
        est = model.stats.invert_target(_conditional_mean(model, seq.X))
        ser = crash.aggregate_exposure(raw.station_id, raw.hour, np.maximum(est, 0.0))
        p = out / "exposure_model.csv"
        ser.complete().to_csv(p)
        written.append(p)
    return written


def _conditional_mean(model, X, batch: int = 4096) -> np.ndarray:
    out = []
    for s in range(0, len(X), batch):
        pred = model.predict(X[s:s + batch])
        out.append(mdn.mixture_mean(pred) if model.config.is_mixture else pred)
    return np.concatenate(out)


def cmd_crash(cfg: dict, out: Path) -> list[Path]:
    hours, counts = crash.load_series(_need(cfg, "crash.crashes"), "crash_count")
    weather = pipeline.load_weather(_need(cfg, "data.weather"))
    if "data.weather_fallback" in cfg:
        weather = pipeline.impute_wind(weather, pipeline.load_weather(_need(cfg, "data.weather_fallback")))
    calendar = pipeline.load_holidays(_need(cfg, "data.holidays"))
    ds = crash.build_crash_dataset(hours, counts, weather, calendar)
    spec = _need(cfg, "crash.exposures")
    exposures = {}
    for item in spec.split(","):
        label, sep, path = item.partition(":")
        if not sep or not label:
            raise CliConfigError(f"crash.exposures: expected label:path, got {item!r}")
        if not Path(path).exists():
            raise CliConfigError(f"crash.exposures: file not found: {path}")
        exposures[label] = crash.load_series(path, "exposure")
    cmp_ = crash.compare_exposures(ds, exposures)
    paths = [out / "crash_comparison.csv", out / "crash_comparison.txt"]
    cmp_.to_csv(paths[0])
    paths[1].write_text(cmp_.format())
    log.info("crash comparison on %d hours (%d dropped for weather, %d for exposure)",
             cmp_.n_obs, ds.dropped, cmp_.dropped)
    return paths


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "crash": cmd_crash,
}

CONFIG_ERRORS = (CliConfigError, models.ConfigError, synthetic.ManifestError, pipeline.StandardizationError)
DATA_ERRORS = (pipeline.DataError, training.ModelFileError,
               FactorTableError, evaluation.WindowGapError, crash.DesignError, OSError)
NUMERIC_ERRORS = (training.TrainingError, crash.NonConvergenceError, DomainError, ShapeError,
                  FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bikeflow", description="Hourly bicycle-flow mixture models and crash regression.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key=value configuration file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        if args.seed is not None:
            cfg["seed"] = cfg.written["seed"] = str(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](cfg, out)
        write_run_manifest(out, args.command, cfg, written)
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
