import csv
import io

import numpy as np
import pytest

from poolfix.errors import ParameterError, UndefinedMetricError
from poolfix.evalbench import PipelineConfig, aggregate, preset, rrmse, run_experiment, sens_spec, stage_table
from poolfix.evalbench.experiments import resolve
from poolfix.evalbench.pipelines import PIPELINES, effective_sigma
from poolfix.evalbench.report import TRIAL_HEADER, write_report
from poolfix.simkit import NoiseConfig, center, forward, gen_pooling, gen_signal


def test_sens_spec_examples():
    assert sens_spec({1, 2}, {1, 3}, 4) == (0.5, 0.5)
    assert sens_spec({1, 2}, {1, 2}, 4) == (1.0, 1.0)
    assert sens_spec({1, 2}, set(), 4) == (0.0, 1.0)
    assert sens_spec(set(), {0}, 4) == (1.0, 0.75)
    assert sens_spec(range(4), range(4), 4) == (1.0, 1.0)
    with pytest.raises(ParameterError):
        sens_spec({5}, set(), 4)


def test_rrmse_examples():
    b = np.array([0.0, 3.0, 4.0])
    assert rrmse(b, b) == 0.0
    assert rrmse(b, np.zeros(3)) == 1.0
    assert rrmse(b, 2 * b) == 1.0
    with pytest.raises(UndefinedMetricError):
        rrmse(np.zeros(3), b)


def test_effective_sigma_floor():
    assert effective_sigma(np.ones(4), 2.5, 1e-4) == 2.5
    assert effective_sigma(np.full(4, 300.0), 0.0, 1e-4) == pytest.approx(0.03)


@pytest.fixture(scope="module")
def noiseless_runs():
    out = []
    for seed in range(2):
        sysm = gen_pooling(120, 200, 0.5, seed)
        sig = gen_signal(200, 3, seed=seed)
        ms = forward(sysm.B, sig, NoiseConfig(kind="none"), seed)
        cfg = PipelineConfig(r_U=4, sigma_tilde=0.0)
        fits = {name: f(ms.z, sysm.B, 0.5, cfg) for name, f in PIPELINES.items()}
        # least squares restricted to the true support of the centered system
        cs = center(ms.z, sysm.B, 0.5)
        ls = np.zeros(200)
        ls[sig.support] = np.linalg.lstsq(cs.A[:, sig.support], cs.y, rcond=None)[0]
        out.append((sig, fits, ls))
    return out


def test_noiseless_clean_estimates(noiseless_runs):
    for sig, fits, ls in noiseless_runs:
        np.testing.assert_allclose(ls, sig.beta, rtol=1e-9)
        for name, (beta_hat, support, _) in fits.items():
            assert rrmse(ls, beta_hat) <= 1e-3, name
            assert sens_spec(sig.support, support, 200)[0] == 1.0, name


def test_noiseless_clean_support_exact(noiseless_runs):
    for sig, fits, _ in noiseless_runs:
        for name, (_, support, _) in fits.items():
            assert sens_spec(sig.support, support, 200) == (1.0, 1.0), name


def test_mmer_uses_unflagged_rows():
    sysm = gen_pooling(80, 200, 0.5, 4)
    sig = gen_signal(200, 5, seed=4)
    ms = forward(sysm.B, sig, NoiseConfig(f_sigma=0.01), 4)
    cfg = PipelineConfig(r_U=6, sigma_tilde=ms.sigma_tilde)
    _, _, aux = PIPELINES["MMER"](ms.z, sysm.B, 0.5, cfg)
    det = aux["detection"]
    assert len(det.fit.delta_hat) == 40 - len(det.J)
    assert len(det.J) <= 6


def test_resolve_presets():
    spec = resolve(preset("EA"), 0.06)
    assert (spec.n, spec.p, spec.s, spec.r, spec.r_U) == (80, 200, 10, 5, 16)
    spec = resolve(preset("LOG_SIGMA"), 0.002)
    assert (spec.n, spec.p, spec.s, spec.r) == (400, 500, 10, 8)
    spec = resolve(preset("ZETA"), 0.1)
    assert spec.r == spec.r_U == 8
    with pytest.raises(ParameterError):
        preset("NOPE")


def test_single_trial_single_value(tmp_path):
    cfg = preset("EA", sweep_values=(0.02,), trials=1)
    results = run_experiment(cfg)
    agg = aggregate(cfg, results)
    assert [m.estimator for m in agg] == list(cfg.estimators)
    assert all(m.trials + m.failed == 1 for m in agg)
    paths = write_report(cfg, results, agg, tmp_path, figures=False)
    names = {p.name for p in paths}
    assert {"EA_trials.csv", "EA_aggregate.csv", "EA_RL_rrmse.dat"} <= names
    rows = list(csv.reader(io.StringIO((tmp_path / "EA_trials.csv").read_text())))
    assert rows[0] == TRIAL_HEADER
    assert len(rows) - 1 == sum(len(r.rows) for r in results)


def test_experiment_is_deterministic():
    cfg = preset("EA", sweep_values=(0.04,), trials=1, estimators=("RL", "MMER"))
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert [r.rows[i][:4] for r in a for i in range(len(r.rows))] == \
        [r.rows[i][:4] for r in b for i in range(len(r.rows))]


def test_stage_table_shape():
    cfg = preset("MULTISTAGE", trials=1, max_stages=2)
    results = run_experiment(cfg)
    table = stage_table(cfg, results)
    assert [row[1] for row in table] == [1, 2]
    # a trial starts with all r mismatches in place
    assert table[0][2] == 4
