from pathlib import Path

from bikeflow import cli

STEPS = ("synth", "ingest", "train", "evaluate", "compare", "crash")


def write_config(root: Path, seed: int, n_days: int = 370, stations: str = "3000,6000", k: int = 4,
                 epochs: int = 2, extra: str = "") -> Path:
    cfg = root / "run.cfg"
    cfg.write_text(f"""\
# small end-to-end run
seed = {seed}
synth.n_days = {n_days}
synth.station_aadct = {stations}
data.weather = synth/weather.csv
data.weather_fallback = synth/weather_fallback.csv
data.counts = synth/counts.csv
data.holidays = synth/holidays.csv
data.factor_table = synth/factors_profile.csv
model.architecture = lstm-mdn
model.k = {k}
model.A = 2
train.max_epochs = {epochs}
eval.model = train/model.txt
eval.draws = 20
compare.models = train/model.txt
crash.crashes = synth/crashes.csv
crash.exposures = TRUE:synth/exposure_true.csv,SVF:compare/exposure_svf.csv,AAWCT:compare/exposure_aawct.csv,MODEL:compare/exposure_model.csv
{extra}""")
    return cfg


def run_all(root: Path, seed: int, **kw) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    cfg = write_config(root, seed, **kw)
    codes = {}
    for step in STEPS:
        codes[step] = cli.main([step, "--config", str(cfg), "--out", str(root / step)])
        if codes[step]:
            break
    return codes


ACCEPTANCE_LINES = []


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
