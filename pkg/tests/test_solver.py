import math

import numpy as np
import pytest
from scipy.stats import norm

import poolfix.solver as solver
from poolfix.errors import ConvergenceError, ParameterError
from poolfix.solver import (
    KKT_TOL, LambdaGrid, _polish, cv_error, kkt_residual, lasso, lilliefors_pvalue, objective, robust_lasso,
    select_lambdas, theory_lambdas,
)


def _instance(n, p, s, seed, noise=0.1):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, p))
    beta = np.zeros(p)
    beta[rng.choice(p, s, replace=False)] = rng.uniform(1, 3, s)
    return A @ beta + noise * rng.standard_normal(n), A, beta


def test_lasso_zero_data_and_large_lambda():
    _, A, _ = _instance(20, 40, 3, 0)
    assert np.all(lasso(np.zeros(20), A, 0.1) == 0)
    y, A, _ = _instance(20, 40, 3, 1)
    lam_max = np.max(np.abs(A.T @ y)) / 20
    assert np.all(lasso(y, A, lam_max) == 0)
    assert np.count_nonzero(lasso(y, A, 0.9 * lam_max)) > 0


def test_lasso_kkt_oracle():
    y, A, _ = _instance(20, 40, 4, 2)
    lam = 0.05
    beta = lasso(y, A, lam)
    g = A.T @ (y - A @ beta) / 20
    act = beta != 0
    assert np.all(np.abs(g[~act]) <= lam + 1e-6)
    assert np.allclose(g[act], lam * np.sign(beta[act]), atol=1e-6)
    assert kkt_residual(y, A, beta, lam=lam) <= 1e-6


def test_robust_lasso_trivial_cases():
    y, A, _ = _instance(20, 40, 3, 3)
    fit = robust_lasso(np.zeros(20), A, 0.1, 0.1)
    assert np.all(fit.beta_hat == 0) and np.all(fit.delta_hat == 0)
    l1 = np.max(np.abs(A.T @ y)) / 20
    l2 = np.max(np.abs(y)) / 20
    fit = robust_lasso(y, A, l1, l2)
    assert np.all(fit.beta_hat == 0) and np.all(fit.delta_hat == 0)
    fit = robust_lasso(y, np.zeros((20, 40)), 0.1, 0.0)
    assert np.array_equal(fit.delta_hat, y)


def test_robust_lasso_fit_fields_and_kkt():
    y, A, _ = _instance(60, 30, 4, 4)
    y[3] += 25.0
    fit = robust_lasso(y, A, 0.05, 0.05)
    assert fit.kkt_gap <= solver.KKT_TOL
    assert kkt_residual(y, A, fit) <= 1e-6
    ref = objective(y, A, fit.beta_hat, fit.delta_hat, 0.05, 0.05)
    assert fit.objective == pytest.approx(ref, rel=1e-10)
    assert abs(fit.delta_hat[3]) > 10


def test_robust_lasso_warm_start_reaches_same_optimum():
    y, A, _ = _instance(30, 60, 4, 5)
    cold = robust_lasso(y, A, 0.05, 0.05)
    warm = robust_lasso(y, A, 0.05, 0.05, beta0=cold.beta_hat + 0.3, delta0=cold.delta_hat - 0.1)
    assert warm.objective == pytest.approx(cold.objective, rel=1e-8)


def test_objective_monotone_in_debug_mode():
    y, A, _ = _instance(25, 50, 5, 6)
    robust_lasso(y, A, 0.02, 0.03, debug=True)
    lasso(y, A, 0.02, debug=True)


def test_non_convergence_reports_kkt_gap():
    y, A, _ = _instance(30, 60, 4, 7)
    with pytest.raises(ConvergenceError) as info:
        robust_lasso(y, A, 1e-4, 1e-4, max_sweeps=2)
    assert info.value.kkt_gap > 0


def test_negative_lambda_rejected():
    y, A, _ = _instance(10, 20, 2, 8)
    with pytest.raises(ParameterError):
        robust_lasso(y, A, -1.0, 0.1)
    with pytest.raises(ParameterError):
        lasso(y, A[:5], 0.1)


def test_kkt_residual_detects_perturbation():
    y, A, _ = _instance(30, 60, 4, 9)
    lam = 0.05
    beta = lasso(y, A, lam)
    j = int(np.flatnonzero(beta)[0])
    col_sq = float(A[:, j] @ A[:, j]) / 30
    bad = beta.copy()
    bad[j] += 1.0
    # the gradient at j moves by exactly col_sq
    assert kkt_residual(y, A, bad, lam=lam) >= col_sq - 1e-6
    assert kkt_residual(np.zeros(30), A, np.zeros(60), lam=lam) == 0.0
    with pytest.raises(ParameterError):
        kkt_residual(y, A, beta)


def test_theory_lambdas_formula():
    l1, l2 = theory_lambdas(1.0, 200, 40, 0)
    # 4 sqrt(ln 200) / sqrt(40) = 1.45579...; the rounded reference value 1.4562 is 4e-4 off
    assert l1 == pytest.approx(1.4562, abs=1e-3)
    assert l2 == pytest.approx(0.1921, abs=5e-5)
    assert l1 == pytest.approx(4 * math.sqrt(math.log(200)) / math.sqrt(40), rel=1e-15)
    with pytest.raises(ParameterError):
        theory_lambdas(1.0, 200, 40, 40)


def test_lilliefors_examples():
    m = 100
    q = norm.ppf((np.arange(1, m + 1) - 0.5) / m)
    assert lilliefors_pvalue(q) >= 0.5
    assert lilliefors_pvalue(np.random.default_rng(0).uniform(0, 1, 1000)) < 0.01
    assert lilliefors_pvalue(np.full(20, 3.0)) == 0.0
    with pytest.raises(ParameterError):
        lilliefors_pvalue(np.arange(5.0))


def test_lilliefors_matches_table_oracle():
    lilliefors = pytest.importorskip("statsmodels.stats.diagnostic").lilliefors
    for seed in range(5):
        x = np.random.default_rng(seed).uniform(0, 1, 100)
        ref = lilliefors(x, dist="norm", pvalmethod="table")[1]
        assert lilliefors_pvalue(x) == pytest.approx(ref, abs=0.03)


def test_lilliefors_power_against_uniform_at_m100():
    # at m = 100 a uniform sample is rejected at 1% only about a quarter of the time
    pv = np.array([lilliefors_pvalue(np.random.default_rng(s).uniform(0, 1, 100)) for s in range(200)])
    assert 0.15 <= np.mean(pv < 0.01) <= 0.35


def test_lilliefors_is_calibrated_on_gaussian_samples():
    rng = np.random.default_rng(1)
    pv = np.array([lilliefors_pvalue(rng.standard_normal(40)) for _ in range(300)])
    assert 0.0 <= np.mean(pv < 0.05) <= 0.10


def test_grid_values_and_validation():
    g = LambdaGrid()
    v = g.values()
    assert len(v) == 25
    assert v[0] == pytest.approx(math.e) and v[-1] == pytest.approx(math.exp(7))
    with pytest.raises(ParameterError):
        LambdaGrid(log_min=3, log_max=2)
    with pytest.raises(ParameterError):
        LambdaGrid(lilliefors_alpha=1.5)


def test_single_point_grid():
    y, A, _ = _instance(20, 40, 3, 10)
    grid = LambdaGrid(log_min=0.5, log_max=0.5, step=1.0)
    assert select_lambdas(y, A, grid, 1.0, 0.5) == (math.exp(0.5), math.exp(0.5))


def test_fallback_when_screen_rejects_everything(monkeypatch):
    y, A, _ = _instance(40, 200, 3, 11)
    monkeypatch.setattr(solver, "gaussian_screen", lambda z, grid: False)
    grid = LambdaGrid(log_min=-2, log_max=0, step=1.0)
    assert select_lambdas(y, A, grid, 1.0, 0.5) == theory_lambdas(1.0, 200, 40, 0)


def _cb_design(n, p, seed):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, 2, (n, p)) - rng.integers(0, 2, (n, p))) / 0.5


def test_selected_pair_is_near_grid_cv_minimum():
    A = _cb_design(30, 60, 12)
    beta = np.zeros(60)
    beta[[3, 17, 40]] = [5.0, 7.0, 9.0]
    y = A @ beta
    grid = LambdaGrid(log_min=-3, log_max=1, step=1.0, cv_folds=5)
    chosen = select_lambdas(y, A, grid, 0.05, 0.5)
    vals = grid.values()
    errs = {(l1, l2): cv_error(y, A, l1, l2, 5) for l1 in vals for l2 in vals}
    best = min(errs.values())
    assert cv_error(y, A, *chosen, 5) <= 2 * best + 1e-12


def test_cv_path_matches_independent_cv():
    A = _cb_design(30, 60, 13)
    beta = np.zeros(60)
    beta[[1, 2]] = [4.0, 6.0]
    y = A @ beta + np.random.default_rng(13).standard_normal(30)
    pairs = [(1.0, 0.5), (0.5, 0.5), (0.2, 0.1)]
    path = solver._cv_path(y, A, pairs, 5)
    for (err, l1, l2) in path:
        assert err == pytest.approx(cv_error(y, A, l1, l2, 5), rel=1e-6)


def test_polish_lands_on_optimum():
    rng = np.random.default_rng(3)
    A = rng.integers(0, 2, size=(80, 200)).astype(float)
    beta = np.zeros(200)
    beta[[4, 50, 120]] = [300.0, 700.0, 150.0]
    y = A @ beta + rng.normal(0, 5, 80)
    fit = robust_lasso(y, A, 5.0, 2.0)
    assert fit.kkt_gap <= KKT_TOL
    # start from a slightly perturbed optimum with the same signs
    b = fit.beta_hat * (1 + 1e-3)
    d = fit.delta_hat * (1 - 1e-3)
    out = _polish(np.asarray(y), np.asfortranarray(A), b, d, 5.0, 2.0, True)
    assert out is not None
    np.testing.assert_allclose(out[0], fit.beta_hat, atol=1e-6)
    np.testing.assert_allclose(out[1], fit.delta_hat, atol=1e-6)


def test_robust_error_shrinks_with_more_rows():
    # 90th percentile of the l1 error at theory penalties, n' = 40 against n' = 80
    from poolfix.simkit import NoiseConfig, center, forward, gen_pooling, gen_signal, inject_mmes

    q90 = []
    for n in (80, 160):
        errs = []
        for k in range(100):
            sysm = gen_pooling(n, 200, 0.5, 1000 + k)
            sig = gen_signal(200, 5, seed=k)
            Bt, _ = inject_mmes(sysm, sig, "SSM", 2, k)
            ms = forward(Bt, sig, NoiseConfig(f_sigma=0.01), k)
            cs = center(ms.z, sysm.B, 0.5, None, ms.sigma_tilde)
            fit = robust_lasso(cs.y, cs.A, *theory_lambdas(cs.sigma_centered, 200, cs.n_prime))
            errs.append(np.abs(fit.beta_hat - sig.beta).sum())
        q90.append(np.quantile(errs, 0.9))
    assert np.all(np.isfinite(q90))
    assert q90[1] < q90[0]
