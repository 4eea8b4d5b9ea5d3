import datetime as dt
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bikeflow import pipeline, synthetic
from bikeflow.synthetic import GeneratorConfig, ManifestError


def ingest(paths):
    weather = pipeline.impute_wind(pipeline.load_weather(paths["weather"]),
                                   pipeline.load_weather(paths["weather_fallback"]))
    return pipeline.build_raw_samples(weather, pipeline.load_counts(paths["counts"]),
                                      pipeline.load_holidays(paths["holidays"]))


@pytest.fixture(scope="module")
def small_panel(tmp_path_factory):
    cfg = GeneratorConfig(seed=3, n_days=60, station_aadct=(3000.0, 6000.0))
    panel = synthetic.generate(cfg)
    return cfg, panel, panel.write(tmp_path_factory.mktemp("panel"))


def test_same_seed_same_bytes(small_panel, tmp_path):
    cfg, _, paths = small_panel
    again = synthetic.generate(cfg).write(tmp_path)
    for name, p in paths.items():
        assert p.read_bytes() == again[name].read_bytes(), name
    other = synthetic.generate(GeneratorConfig(seed=4, n_days=60, station_aadct=(3000.0, 6000.0))).write(tmp_path / "o")
    assert other["counts"].read_bytes() != paths["counts"].read_bytes()


def test_panel_shape_and_ingest(small_panel):
    cfg, panel, paths = small_panel
    raw = ingest(paths)
    assert len(raw) == 60 * 24 * 2 and not raw.dropped
    assert int(panel.manifest["derived.n_hours"]) == 60 * 24
    assert float(panel.manifest["derived.truncation_fraction"]) < 0.01


def test_holidays_include_fixed_and_movable_days():
    assert synthetic.easter(2018) == dt.date(2018, 4, 1)
    assert synthetic.easter(2019) == dt.date(2019, 4, 21)
    days = synthetic.danish_holidays(2018)
    assert dt.date(2018, 12, 25) in days and dt.date(2018, 1, 1) in days
    assert dt.date(2018, 3, 29) in days    # Maundy Thursday


def test_crash_rate_calibration():
    cfg = GeneratorConfig(seed=1, n_days=365, station_aadct=(3000.0,))
    panel = synthetic.generate(cfg)
    assert float(panel.manifest["derived.mean_crash_rate"]) == pytest.approx(cfg.crash_rate, rel=1e-12)
    n = len(panel.crashes)
    observed = panel.crashes[:, 1].mean()
    assert abs(observed - cfg.crash_rate) < 3 * math.sqrt(cfg.crash_rate / n)


def test_zero_noise_single_component_is_deterministic(tmp_path):
    cfg = GeneratorConfig(seed=2, n_days=14, station_aadct=(5000.0,), n_components=1, noise_rel=0.0, noise_abs=0.0)
    panel = synthetic.generate(cfg)
    raw = ingest(panel.write(tmp_path))
    p = synthetic.true_mixture(panel.manifest, raw)
    assert_allclose(raw.y, p.mu[:, 0], atol=5e-4)
    assert int(panel.manifest["derived.truncated_draws"]) == 0


def test_true_nll_matches_generating_law(small_panel):
    _, panel, paths = small_panel
    raw = ingest(paths)
    p = synthetic.true_mixture(panel.manifest, raw)
    assert p.alpha.shape == (len(raw), 2)
    # draws were rounded to 3 decimals, so recompute the density directly
    dens = np.sum(p.alpha * np.exp(-(raw.y[:, None] - p.mu) ** 2 / (2 * p.nu)) / np.sqrt(2 * np.pi * p.nu), axis=1)
    assert synthetic.true_nll(panel.manifest, raw) == pytest.approx(-np.mean(np.log(dens)), rel=1e-10)


def test_true_nll_rejects_foreign_samples(small_panel):
    _, panel, paths = small_panel
    raw = ingest(paths)
    bad = raw.subset(np.arange(10))
    bad.aadct = bad.aadct + 1.0
    with pytest.raises(ManifestError):
        synthetic.true_nll(panel.manifest, bad)
    bad = raw.subset(np.arange(10))
    bad.station_id = np.array(["X9"] * 10)
    with pytest.raises(ManifestError):
        synthetic.true_nll(panel.manifest, bad)


def test_manifest_round_trip(tmp_path):
    cfg = GeneratorConfig(seed=9, n_days=30, station_aadct=(1.5, 2.5), crash_rate=0.1)
    m = synthetic.config_to_manifest(cfg)
    synthetic.write_manifest(m, tmp_path / "m.txt")
    back = synthetic.manifest_to_config(synthetic.read_manifest(tmp_path / "m.txt"))
    assert back == cfg
    with pytest.raises(ManifestError):
        synthetic.manifest_to_config({"format": "something else"})
    (tmp_path / "bad.txt").write_text("no equals sign here\n")
    with pytest.raises(ManifestError):
        synthetic.read_manifest(tmp_path / "bad.txt")


def test_weather_missingness_seasonal(small_panel):
    _, panel, _ = small_panel
    j = pipeline.WEATHER_FIELDS.index("wind_ms")
    primary = np.isnan(panel.weather[:, j]).mean()
    fallback = np.isnan(panel.weather_fallback[:, j]).mean()
    # January/February panel: primary wind mostly gone, fallback mostly present
    assert primary > 0.3 and fallback < 0.2
