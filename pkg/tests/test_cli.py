import hashlib

import pytest

from bikeflow import cli, training

from conftest import STEPS, run_all, write_config


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    codes = run_all(root, seed=11)
    return root, codes


def test_all_commands_succeed(full_run):
    root, codes = full_run
    assert codes == {s: 0 for s in STEPS}
    for step in STEPS:
        assert (root / step / "run_manifest.txt").exists()


def test_ingest_of_synthetic_panel_drops_nothing(full_run):
    root, _ = full_run
    assert (root / "ingest" / "drops.csv").read_text() == "station_id,hour_utc,reason\n"
    total = (root / "ingest" / "ingest_summary.csv").read_text().splitlines()[-1]
    assert total == f"total,{370 * 24 * 2},0"


def test_run_manifest_records_hashes(full_run):
    root, _ = full_run
    lines = dict(l.split("=", 1) for l in (root / "train" / "run_manifest.txt").read_text().splitlines())
    assert lines["command"] == "train" and lines["seed"] == "11"
    assert lines["config.model.k"] == "4"
    digest = hashlib.sha256((root / "train" / "model.txt").read_bytes()).hexdigest()
    assert lines["output.model.txt.sha256"] == digest
    for key in ("config_hash", "version.numpy", "version.scipy", "version.python", "version.bikeflow"):
        assert lines[key]


def test_outputs_present(full_run):
    root, _ = full_run
    cmp_dir = root / "compare"
    for name in ("comparison.csv", "comparison.txt", "heat_1.csv", "heat_svf.csv", "series_1.csv",
                 "svf_estimates.csv", "exposure_svf.csv", "exposure_aawct.csv", "exposure_model.csv"):
        assert (cmp_dir / name).exists(), name
    series = (cmp_dir / "series_1.csv").read_text().splitlines()
    assert len(series) == 149 and series[0] == "hour_utc,actual,model,svf"
    assert "improvement over SVF" in (cmp_dir / "comparison.txt").read_text()
    crash_txt = (root / "crash" / "crash_comparison.txt").read_text()
    assert "TRUE estimate" in crash_txt and "Log-likelihood" in crash_txt
    model = training.load_model(root / "train" / "model.txt")
    assert model.config.k == 4 and len(model.history) == 2


def test_train_twice_identical(full_run, tmp_path):
    root, _ = full_run
    code = cli.main(["train", "--config", str(root / "run.cfg"), "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "model.txt").read_bytes() == (root / "train" / "model.txt").read_bytes()


def test_seed_override(full_run, tmp_path):
    root, _ = full_run
    assert cli.main(["train", "--config", str(root / "run.cfg"), "--seed", "12", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.txt").read_bytes() != (root / "train" / "model.txt").read_bytes()
    assert "seed=12" in (tmp_path / "run_manifest.txt").read_text()


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 1\nmodel.colour = red\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    bad.write_text("seed = 1\nbogus.key = 3\n")
    assert cli.main(["ingest", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    bad.write_text("seed = 1\nseed = 2\n")
    assert cli.main(["ingest", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["ingest", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err


def test_data_errors_exit_2(full_run, tmp_path):
    root, _ = full_run
    counts = tmp_path / "counts.csv"
    counts.write_text("station_id,hour_utc,volume,aadct,aawct\nS01,2017-01-01T00:00:00Z,oops,1,1\n")
    cfg = tmp_path / "c.cfg"
    syn = root / "synth"
    cfg.write_text(f"seed = 1\ndata.weather = {syn}/weather.csv\ndata.counts = {counts}\n"
                   f"data.holidays = {syn}/holidays.csv\n")
    assert cli.main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    truncated = tmp_path / "m.txt"
    truncated.write_text("\n".join((root / "train" / "model.txt").read_text().splitlines()[:10]) + "\n")
    cfg.write_text(f"seed = 1\ndata.weather = {syn}/weather.csv\ndata.counts = {syn}/counts.csv\n"
                   f"data.holidays = {syn}/holidays.csv\neval.model = {truncated}\n")
    assert cli.main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_errors_exit_3(full_run, tmp_path):
    root, _ = full_run
    text = (root / "run.cfg").read_text().replace("synth/", str(root / "synth") + "/")
    cfg = tmp_path / "n.cfg"
    cfg.write_text(text + "train.learning_rate = 1e300\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_config_paths_resolve_relative_to_file(tmp_path):
    cfg = write_config(tmp_path, seed=1)
    parsed = cli.read_config(cfg)
    assert parsed["data.counts"] == str(tmp_path / "synth" / "counts.csv")
    assert parsed.written["data.counts"] == "synth/counts.csv"
    assert parsed["crash.exposures"].split(",")[0] == f"TRUE:{tmp_path / 'synth' / 'exposure_true.csv'}"
