"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from scipy import integrate, optimize, special

from bikeflow import crash, evaluation, mdn, models, pipeline, synthetic, training
from bikeflow.baselines import svf_estimates, uniform_factor_table
from bikeflow.mdn import MixtureParams
from bikeflow.models import ModelConfig
from bikeflow.numerics import RngStream
from bikeflow.pipeline import HolidayCalendar, WeatherTable, to_datetime
from bikeflow.training import TrainConfig

from conftest import STEPS, record, run_all

PUBLISHED_COUNTS = [
    (ModelConfig("lstm-regression", k=32), 6561),
    (ModelConfig("lstm-regression", k=64), 21313),
    (ModelConfig("lstm-dense-regression", k=32, m=6), 6733),
    (ModelConfig("lstm-dense-regression", k=64, m=6), 21645),
    (ModelConfig("lstm-mdn", k=32, A=6), 7122),
    (ModelConfig("lstm-mdn", k=32, A=8), 7320),
    (ModelConfig("lstm-mdn", k=64, A=6), 22418),
    (ModelConfig("lstm-mdn", k=64, A=8), 22808),
    (ModelConfig("mlp-baseline"), 162025),
]

RECOVERY_EPOCHS = 150
RECOVERY_PATIENCE = 100


def test_parameter_counts():
    t0 = time.perf_counter()
    got = [models.param_count(cfg) for cfg, _ in PUBLISHED_COUNTS]
    want = [n for _, n in PUBLISHED_COUNTS]
    elapsed = time.perf_counter() - t0
    ok = got == want and elapsed < 1.0
    record("parameter counts", ok, f"{got} vs {want} in {elapsed * 1e3:.1f} ms")
    assert ok


def _max_rel_fd_error(seed):
    cfg = ModelConfig("lstm-mdn", k=4, A=3, D=3, S=6)
    rng = np.random.default_rng(seed)
    params = models.init_params(cfg, RngStream(seed))
    for v in params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    X, y = rng.normal(size=(5, 6, 3)), rng.normal(size=5)
    _, grads = models.loss_and_grads(cfg, params, X, y, mode="infer")
    eps, worst = 1e-5, 0.0
    for name, w in params.items():
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + eps
            up = models.loss_and_grads(cfg, params, X, y, mode="infer")[0]
            w[idx] = old - eps
            dn = models.loss_and_grads(cfg, params, X, y, mode="infer")[0]
            w[idx] = old
            num = (up - dn) / (2 * eps)
            # relative error with a floor so vanishing gradients compare absolutely
            worst = max(worst, abs(num - grads[name][idx]) / max(abs(num), abs(grads[name][idx]), 1e-6))
    return worst


def test_gradient_correctness():
    t0 = time.perf_counter()
    worst = max(_max_rel_fd_error(seed) for seed in range(20))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    record("gradient correctness", ok, f"max relative error {worst:.2e} over 20 seeds in {elapsed:.1f} s")
    assert ok


def _random_mixture(rng):
    A = int(rng.integers(1, 9))
    a = rng.uniform(0.05, 1.0, A)
    return MixtureParams(a / a.sum(), rng.normal(scale=2.0, size=A), rng.uniform(0.05, 3.0, A))


def test_density_validity():
    rng = np.random.default_rng(2024)
    worst_sum = worst_int = 0.0
    for _ in range(1000):
        p = _random_mixture(rng)
        sd = np.sqrt(p.nu)
        lo, hi = float((p.mu - 12 * sd).min()), float((p.mu + 12 * sd).max())
        total = integrate.quad(lambda t: math.exp(mdn.mixture_log_density(t, p)), lo, hi,
                               points=sorted(set(p.mu.tolist())), limit=500, epsabs=1e-12, epsrel=1e-12)[0]
        worst_sum = max(worst_sum, abs(p.alpha.sum() - 1))
        worst_int = max(worst_int, abs(total - 1))
    ok = worst_sum <= 1e-12 and worst_int <= 1e-6
    record("density validity", ok, f"max |sum alpha - 1| = {worst_sum:.1e}, max |integral - 1| = {worst_int:.1e}")
    assert ok


def test_sampling_consistency():
    n = 10**5
    worst = 0.0
    for j in range(50):
        p = _random_mixture(np.random.default_rng(5000 + j))
        d = mdn.sample(p, RngStream(j, 77), n=n)
        m, v = mdn.mixture_mean(p), mdn.mixture_variance(p)
        se_mean = math.sqrt(v / n)
        c = d - d.mean()
        se_var = math.sqrt((np.mean(c ** 4) - np.mean(c ** 2) ** 2) / n)
        worst = max(worst, abs(d.mean() - m) / se_mean, abs(d.var(ddof=1) - v) / se_var)
    ok = worst <= 3.0
    record("sampling consistency", ok, f"largest deviation {worst:.2f} standard errors over 50 mixtures")
    assert ok


# --------------------------------------------------------------------------
# synthetic recovery


@pytest.fixture(scope="module")
def recovery(tmp_path_factory):
    panel = synthetic.generate(synthetic.GeneratorConfig(seed=1))
    paths = panel.write(tmp_path_factory.mktemp("recovery"))
    weather = pipeline.impute_wind(pipeline.load_weather(paths["weather"]),
                                   pipeline.load_weather(paths["weather_fallback"]))
    raw = pipeline.build_raw_samples(weather, pipeline.load_counts(paths["counts"]),
                                     pipeline.load_holidays(paths["holidays"]))
    sp = training.split_dataset(len(raw), 1)
    tr_raw = raw.subset(sp.train)
    stats = pipeline.fit_standardization(tr_raw.X, tr_raw.y, raw.feature_names)
    tr, va, te = (pipeline.assemble_sequences(raw.subset(i), stats) for i in (sp.train, sp.validation, sp.test))
    t0 = time.perf_counter()
    model = training.train(ModelConfig("lstm-mdn", k=32, A=6),
                           TrainConfig(max_epochs=RECOVERY_EPOCHS, patience=RECOVERY_PATIENCE, seed=1),
                           (tr.X, tr.y), (va.X, va.y), stats=stats)
    elapsed = time.perf_counter() - t0
    report = evaluation.evaluate(model, te, RngStream(1, 5))
    return dict(panel=panel, raw=raw, te=te, model=model, report=report, elapsed=elapsed, stats=stats)


def test_synthetic_recovery(recovery):
    r, te, stats = recovery["report"], recovery["te"], recovery["stats"]
    # the model scores standardized targets; the change of variables adds ln(std)
    nll_raw = r.nll_mu + math.log(stats.target_std)
    truth = synthetic.true_nll(recovery["panel"].manifest, te.raw)
    gap = abs(nll_raw - truth) / abs(truth)
    when = [to_datetime(int(h)) for h in te.hour]
    holidays = te.raw.X[:, 0, list(te.raw.feature_names).index("holiday")]
    svf = stats.apply_target(svf_estimates(te.raw.aadct, te.raw.aawct, [t.month for t in when],
                                           [t.weekday() for t in when], holidays, [t.hour for t in when],
                                           uniform_factor_table()))
    mse_svf = float(np.mean((te.y - svf) ** 2))
    # training-mean predictor is 0 on the standardized scale
    mse_mean = float(np.mean(te.y ** 2))
    elapsed = recovery["elapsed"]
    ok = gap <= 0.05 and r.mse_mu < mse_svf and r.mse_mu < mse_mean and elapsed < 900
    record("synthetic recovery", ok,
           f"n={len(recovery['raw'])}, test NLL {nll_raw:.4f} vs true {truth:.4f} ({100 * gap:.2f}% gap); "
           f"mse_mu {r.mse_mu:.4f} < flat SVF {mse_svf:.4f}, < mean {mse_mean:.4f}; "
           f"training {elapsed:.0f} s, {len(recovery['model'].history)} epochs, best {recovery['model'].best_epoch}")
    assert ok


def test_ordering_properties(recovery):
    r = recovery["report"]
    ok = r.mse_hat > r.mse_mu and r.nll_hat > r.nll_mu
    record("ordering properties", ok, f"mse_hat {r.mse_hat:.4f} > mse_mu {r.mse_mu:.4f}; "
                                      f"nll_hat {r.nll_hat:.4f} > nll_mu {r.nll_mu:.4f}")
    assert ok


def test_improvement_arithmetic():
    lstm = evaluation.improvement_pct(0.129, 0.377)
    best = evaluation.improvement_pct(0.102, 0.377)
    ok = round(lstm, 1) == 65.8 and round(lstm) == 66 and round(best, 1) == 72.9
    record("improvement arithmetic", ok, f"LSTM {lstm:.1f}% (rounds to {round(lstm)}%), best MDN {best:.1f}% "
                                         "(text quotes about 77%)")
    assert ok


# --------------------------------------------------------------------------
# crash model


def _crash_replication(seed):
    panel = synthetic.generate(synthetic.GeneratorConfig(seed=seed))
    weather = pipeline.impute_wind(WeatherTable(panel.minutes, panel.weather),
                                   WeatherTable(panel.minutes, panel.weather_fallback))
    cal = HolidayCalendar(panel.holidays)
    hours = panel.crashes[:, 0]
    ds = crash.build_crash_dataset(hours, panel.crashes[:, 1], weather, cal)
    sid = np.array([r[0] for r in panel.counts])
    h = np.array([r[1] for r in panel.counts])
    aadct = np.array([r[3] for r in panel.counts])
    aawct = np.array([r[4] for r in panel.counts])
    # calendar lookups once per hour, then broadcast to station rows
    uh, inv = np.unique(h, return_inverse=True)
    when = [to_datetime(int(x)) for x in uh]
    cols = np.array([(t.month, t.weekday(), cal.is_holiday(t.date()), t.hour) for t in when])[inv]
    svf = svf_estimates(aadct, aawct, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], synthetic.true_profile_table())
    s = crash.aggregate_exposure(sid, h, svf)
    a = crash.aawct_exposure(sid, h, aawct)
    return crash.compare_exposures(ds, {"TRUE": (hours, panel.true_exposure), "SVF": (s.hours, s.exposure),
                                        "AAWCT": (a.hours, a.exposure)})


def test_poisson_glm():
    t0 = time.perf_counter()
    y = np.zeros(100)
    y[:8] = 1
    b0 = crash.poisson_fit(np.ones((100, 1)), y).coef[0]
    err_int = abs(b0 - math.log(0.08))

    rng = np.random.default_rng(31)
    X = np.column_stack([np.ones(500), rng.normal(scale=0.5, size=(500, 3))])
    yy = rng.poisson(np.exp(X @ np.array([-0.5, 0.4, -0.3, 0.2]))).astype(float)
    fit = crash.poisson_fit(X, yy)
    score = float(np.max(np.abs(X.T @ (yy - fit.fitted(X)))))
    ref = optimize.minimize(lambda b: -np.sum(yy * (X @ b) - np.exp(X @ b) - special.gammaln(yy + 1)),
                            np.zeros(4), jac=lambda b: -X.T @ (yy - np.exp(X @ b)), method="BFGS",
                            options={"gtol": 1e-11})
    err_oracle = float(np.max(np.abs(fit.coef - ref.x)))

    wins, n_rep = 0, 100
    for seed in range(1, n_rep + 1):
        wins += _crash_replication(seed).best() == "TRUE"
    elapsed = time.perf_counter() - t0
    ok = err_int <= 1e-10 and score <= 1e-6 and err_oracle <= 1e-6 and wins >= 95 and elapsed < 300
    record("poisson glm", ok, f"intercept error {err_int:.1e}, max score {score:.1e}, oracle gap {err_oracle:.1e}; "
                              f"true exposure best in {wins}/{n_rep} replications; {elapsed:.0f} s")
    assert ok


def test_determinism(tmp_path):
    a = run_all(tmp_path / "a", seed=7)
    b = run_all(tmp_path / "b", seed=7)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = a == b == {s: 0 for s in STEPS} and not differ and len(files) > 20
    record("determinism", ok, f"{len(files)} output files over {len(STEPS)} commands, {len(differ)} differ")
    assert ok


def test_early_stopping():
    cfg = ModelConfig("lstm-mdn", k=4, A=2, D=3)
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(200, 6, 3)), rng.normal(size=200)
    E, L = 6, 5
    seen = {}

    def rigged(params, epoch):
        seen[epoch] = {k: v.copy() for k, v in params.items()}
        return 1.0 / epoch if epoch <= E else 1.0 / E + 0.01 * (epoch - E)

    m = training.train(cfg, TrainConfig(patience=L, max_epochs=100, batch_size=64), (X, y), (X[:20], y[:20]),
                       validation_loss=rigged)
    same = all(np.array_equal(m.params[k], seen[E][k]) for k in m.params)
    ok = len(m.history) == E + L and m.best_epoch == E and same
    record("early stopping", ok, f"halted after {len(m.history)} epochs (E+L = {E + L}), "
                                 f"returned epoch {m.best_epoch} weights: {same}")
    assert ok
