"""Experiment presets and the seeded trial runner."""
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..detector import DetectorSettings
from ..errors import ParameterError, PoolfixError
from ..rng import derive_seed
from ..simkit import NoiseConfig, PoolingSystem, forward, gen_pooling, gen_signal, inject_mmes
from .metrics import rrmse, sens_spec
from .pipelines import ESTIMATORS, PIPELINES, PipelineConfig

SETTINGS = ("EA", "EB", "EC", "ED", "ZETA", "LOG_SIGMA", "LOG_N", "MULTISTAGE", "CONVERGENCE")

# seed-derivation tags
_MATRIX, _SIGNAL, _MME, _NOISE, _SOLVE = 101, 102, 103, 104, 105


@dataclass
class ExperimentConfig:
    setting: str
    sweep_name: str
    sweep_values: tuple
    p: int = 200
    n: int = 80
    f_sp: float = 0.05
    s: int = None  # overrides f_sp
    f_adv: float = 0.02
    r: int = None  # overrides f_adv
    f_sigma: float = 0.01
    noise: str = "gaussian"
    q: float = 0.95
    theta: float = 0.5
    model: str = "SSM"
    zeta: float = 0.2
    match_r_U: bool = False  # r_U = r instead of floor(zeta n)
    trials: int = 25
    seed: int = 2024
    estimators: tuple = ESTIMATORS
    fix_matrix: bool = True
    fix_signal: bool = True
    fix_noise: bool = False  # same noise draw for every sweep value
    lambda_mode: str = "theory"
    alpha: float = 0.05
    max_stages: int = 10
    stop_early: bool = True
    epsilon: float = None
    perm_pool: str = "flagged"

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ParameterError(f"unknown setting {self.setting!r}")
        if self.trials < 1:
            raise ParameterError("need at least one trial")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ParameterError(f"unknown estimators {sorted(unknown)}")
        self.sweep_values = tuple(self.sweep_values)
        self.estimators = tuple(self.estimators)


def _grid(start, stop, step):
    k = int(round((stop - start) / step))
    return tuple(round(start + i * step, 10) for i in range(k + 1))


def preset(setting, **overrides):
    """Named experiment with its published constants; keyword overrides win."""
    base = {
        "EA": dict(sweep_name="f_adv", sweep_values=_grid(0.02, 0.10, 0.02), n=80, f_sp=0.05, f_sigma=0.01),
        "EB": dict(sweep_name="n", sweep_values=(50, 60, 70, 80, 90), f_adv=0.02, f_sp=0.05, f_sigma=0.01,
                   fix_matrix=False),
        "EC": dict(sweep_name="f_sigma", sweep_values=_grid(0.01, 0.05, 0.01), n=80, f_adv=0.01, f_sp=0.05),
        "ED": dict(sweep_name="f_sp", sweep_values=(0.01, 0.04, 0.07), n=80, f_adv=0.01, f_sigma=0.01,
                   fix_signal=False),
        "ZETA": dict(sweep_name="zeta", sweep_values=_grid(0.02, 0.30, 0.02), n=80, f_sp=0.05, f_sigma=0.01,
                     theta=0.1, match_r_U=True),
        "LOG_SIGMA": dict(sweep_name="f_sigma", sweep_values=_grid(0.002, 0.010, 0.002), n=400, s=10, r=8, p=500,
                          model="PERM", noise="lognormal_pcr", trials=10),
        "LOG_N": dict(sweep_name="n", sweep_values=(250, 300, 350, 400, 450), s=10, r=8, p=500, f_sigma=0.01,
                      model="PERM", noise="lognormal_pcr", fix_matrix=False, trials=10),
        "MULTISTAGE": dict(sweep_name="r", sweep_values=(4,), p=200, n=100, s=5, f_sigma=0.01, trials=20,
                           max_stages=5, stop_early=False, estimators=("CAPE",)),
        "CONVERGENCE": dict(sweep_name="r", sweep_values=(0, 2, 4, 6, 8, 10), p=200, n=80, f_sp=0.05,
                            f_sigma=0.01, model="PERM", trials=1, max_stages=10, stop_early=False,
                            fix_noise=True, estimators=("CAPE",)),
    }
    if setting not in base:
        raise ParameterError(f"unknown setting {setting!r}")
    kw = dict(base[setting])
    kw.update(overrides)
    return ExperimentConfig(setting=setting, **kw)


@dataclass
class TrialSpec:
    """Resolved per-sweep-value parameters."""

    n: int
    p: int
    s: int
    r: int
    r_U: int
    f_sigma: float


def resolve(cfg, value):
    kw = dict(n=cfg.n, p=cfg.p, f_sp=cfg.f_sp, f_adv=cfg.f_adv, f_sigma=cfg.f_sigma, zeta=cfg.zeta, r=cfg.r, s=cfg.s)
    if cfg.sweep_name not in kw:
        raise ParameterError(f"unknown sweep variable {cfg.sweep_name!r}")
    kw[cfg.sweep_name] = value
    if cfg.sweep_name == "f_sp":
        kw["s"] = None
    if cfg.sweep_name in ("f_adv", "zeta"):
        kw["r"] = None
    n, p = int(kw["n"]), int(kw["p"])
    s = int(kw["s"]) if kw["s"] is not None else int(math.floor(kw["f_sp"] * p + 0.5))
    frac = kw["zeta"] if cfg.sweep_name == "zeta" else kw["f_adv"]
    r = int(kw["r"]) if kw["r"] is not None else max(1, int(math.floor(frac * n + 0.5)))
    if cfg.model == "PERM" and r % 2:
        r += 1
    r_U = r if cfg.match_r_U else int(math.floor(cfg.zeta * n))
    r_U = min(r_U, n // 2 - 1)
    return TrialSpec(n=n, p=p, s=s, r=r, r_U=r_U, f_sigma=float(kw["f_sigma"]))


def generate(cfg, si, trial):
    """Draw ``(system, signal, B_tilde, records, measurements, spec)`` for one trial."""
    spec = resolve(cfg, cfg.sweep_values[si])
    mseed = derive_seed(cfg.seed, _MATRIX, spec.n) if cfg.fix_matrix else derive_seed(cfg.seed, _MATRIX, si, trial)
    sseed = derive_seed(cfg.seed, _SIGNAL, spec.s) if cfg.fix_signal else derive_seed(cfg.seed, _SIGNAL, si, trial)
    system = gen_pooling(spec.n, spec.p, cfg.theta, mseed)
    signal = gen_signal(spec.p, spec.s, seed=sseed)
    B_tilde, records = inject_mmes(system, signal.beta, cfg.model, spec.r, derive_seed(cfg.seed, _MME, si, trial))
    nseed = derive_seed(cfg.seed, _NOISE, trial) if cfg.fix_noise else derive_seed(cfg.seed, _NOISE, si, trial)
    ms = forward(B_tilde, signal.beta, NoiseConfig(cfg.noise, spec.f_sigma, cfg.q), nseed)
    return system, signal, B_tilde, records, ms, spec


def _pipeline_cfg(cfg, spec, sigma_tilde, si, trial):
    return PipelineConfig(
        r_U=spec.r_U, sigma_tilde=sigma_tilde, model=cfg.model, alpha=cfg.alpha,
        detector=DetectorSettings(lambda_mode=cfg.lambda_mode), epsilon=cfg.epsilon, max_stages=cfg.max_stages,
        stop_early=cfg.stop_early, perm_pool=cfg.perm_pool, seed=derive_seed(cfg.seed, _SOLVE, si, trial),
    )


@dataclass
class TrialResult:
    si: int
    trial: int
    seed: int
    rows: list = field(default_factory=list)  # (estimator, sens, spec, rrmse, runtime_ms)
    failures: list = field(default_factory=list)  # (estimator, message)
    stages: list = field(default_factory=list)  # (stage, n_wrong, n_true_flag, n_false_flag)
    final_wrong: int = -1
    f_ape: list = field(default_factory=list)  # f_ape(0), f_ape(1), ...


def run_trial(cfg, si, trial):
    seed = derive_seed(cfg.seed, si, trial)
    out = TrialResult(si=si, trial=trial, seed=seed)
    try:
        system, signal, B_tilde, records, ms, spec = generate(cfg, si, trial)
    except PoolfixError as exc:
        out.failures = [(est, f"generation: {exc}") for est in cfg.estimators]
        return out
    pcfg = _pipeline_cfg(cfg, spec, ms.sigma_tilde, si, trial)
    for est in cfg.estimators:
        t0 = time.perf_counter()
        try:
            if est == "CAPE":
                beta_hat, support, aux = PIPELINES[est](ms.z, system.B, cfg.theta, pcfg, B_true=B_tilde)
                res = aux["correction"]
                out.stages = [(st.stage, st.n_wrong, st.n_true_flag, st.n_false_flag) for st in res.stages]
                out.final_wrong = int(np.sum(np.any(res.B_hat != B_tilde, axis=1)))
                out.f_ape = [res.f_ape_initial] + list(res.f_ape_trace)
            else:
                beta_hat, support, aux = PIPELINES[est](ms.z, system.B, cfg.theta, pcfg)
        except PoolfixError as exc:
            out.failures.append((est, f"{type(exc).__name__}: {exc}"))
            continue
        ms_elapsed = (time.perf_counter() - t0) * 1e3
        sens, spec_ = sens_spec(signal.support, support, spec.p)
        err = float("nan") if est == "ODRLT" or signal.s == 0 else rrmse(signal.beta, beta_hat)
        out.rows.append((est, sens, spec_, err, ms_elapsed))
    return out


def _job(args):
    cfg, si, trial = args
    return run_trial(cfg, si, trial)


def run_experiment(cfg, workers=1, progress=None):
    """Run every (sweep value, trial) job; results are sorted by that key."""
    jobs = [(cfg, si, t) for si in range(len(cfg.sweep_values)) for t in range(cfg.trials)]
    results = []
    if workers <= 1:
        for job in jobs:
            results.append(_job(job))
            if progress:
                progress(len(results), len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_job, jobs):
                results.append(res)
                if progress:
                    progress(len(results), len(jobs))
    results.sort(key=lambda r: (r.si, r.trial))
    return results


@dataclass
class MetricsRow:
    estimator: str
    sweep_value: float
    sensitivity: float
    specificity: float
    rrmse: float
    trials: int
    runtime_ms: float
    sensitivity_std: float = float("nan")
    specificity_std: float = float("nan")
    rrmse_std: float = float("nan")
    failed: int = 0


def _mean_std(xs):
    a = np.asarray([x for x in xs if not math.isnan(x)], dtype=float)
    if a.size == 0:
        return float("nan"), float("nan")
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def aggregate(cfg, results):
    """Per (sweep value, estimator) means and standard deviations."""
    rows = []
    for si, value in enumerate(cfg.sweep_values):
        mine = [r for r in results if r.si == si]
        for est in cfg.estimators:
            got = [row for r in mine for row in r.rows if row[0] == est]
            failed = sum(1 for r in mine for f in r.failures if f[0] == est)
            sens = _mean_std([g[1] for g in got])
            spec = _mean_std([g[2] for g in got])
            err = _mean_std([g[3] for g in got])
            rt = _mean_std([g[4] for g in got])[0]
            rows.append(MetricsRow(est, value, sens[0], spec[0], err[0], len(got), rt, sens[1], spec[1], err[1],
                                   failed))
    return rows


def stage_table(cfg, results):
    """Mean ``(N_E, N_ET, N_EF)`` per stage across trials of each sweep value."""
    table = []
    for si, value in enumerate(cfg.sweep_values):
        mine = [r for r in results if r.si == si and r.stages]
        if not mine:
            continue
        k = max(len(r.stages) for r in mine)
        for stage in range(1, k + 1):
            vals = [r.stages[stage - 1] for r in mine if len(r.stages) >= stage]
            table.append((value, stage, float(np.mean([v[1] for v in vals])), float(np.mean([v[2] for v in vals])),
                          float(np.mean([v[3] for v in vals])), len(vals)))
    return table


def config_dict(cfg):
    return asdict(cfg)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
