"""The four estimators compared in the experiments.

Every pipeline maps ``(z, B, theta, cfg)`` to ``(beta_hat, declared_support,
aux)``. Declared supports come from per-coordinate z-tests on the debiased
signal estimate.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ..corrector import CapeConfig, cape
from ..debias import debias_beta
from ..detector import DetectorSettings, detect_mmes
from ..simkit import center
from ..solver import robust_lasso, select_lambdas, theory_lambdas

ESTIMATORS = ("RL", "MMER", "CAPE", "ODRLT")


@dataclass
class PipelineConfig:
    r_U: int
    sigma_tilde: float
    model: str = "SSM"
    alpha: float = 0.05
    support_alpha: float = 0.05
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    epsilon: float = None
    max_stages: int = 10
    stop_early: bool = True
    perm_pool: str = "flagged"
    seed: int = 0
    # relative floor applied when the noise level is zero
    sigma_floor: float = 1e-4


def effective_sigma(z, sigma_tilde, floor):
    """Noise level used for inference; a tiny positive floor for noiseless data."""
    if sigma_tilde > 0:
        return float(sigma_tilde)
    scale = math.sqrt(float(np.mean(np.square(z)))) if len(z) else 1.0
    return floor * max(scale, 1.0)


def declared_support(y, A, fit, sigma, alpha=0.05):
    """Coordinates whose debiased z-score exceeds the two-sided ``alpha`` cutoff."""
    beta_w, se = debias_beta(y - fit.delta_hat, A, fit.beta_hat, sigma, allow_zero_columns=True)
    mag = np.abs(beta_w)
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(se > 0, mag / se, np.where(mag > 0, np.inf, 0.0))
    zs = np.where(np.isfinite(se), zs, 0.0)
    return np.flatnonzero(zs > norm.isf(alpha / 2)), beta_w


def _lambdas(cs, cfg, r_hat=0):
    d = cfg.detector
    if d.lambdas is not None:
        return d.lambdas
    if d.lambda_mode == "theory":
        return theory_lambdas(cs.sigma_centered, cs.A.shape[1], cs.n_prime, r_hat)
    return select_lambdas(cs.y, cs.A, d.grid or _default_grid(), cs.sigma_centered, cs.theta, r_hat)


def _default_grid():
    from ..solver import LambdaGrid

    return LambdaGrid()


def _settings(cfg, first):
    d = cfg.detector
    if d.lambda_mode == "grid_first" and d.lambdas is None:
        return DetectorSettings(lambda_mode="theory", grid=d.grid, max_iter=d.max_iter, two_sided=d.two_sided,
                                c_mu=d.c_mu, smoother=d.smoother, lambdas=first)
    return d


def _centered(z, B, theta, cfg):
    sigma = effective_sigma(z, cfg.sigma_tilde, cfg.sigma_floor)
    return center(z, B, theta, None, sigma), sigma


def pipeline_rl(z, B, theta, cfg):
    cs, _ = _centered(z, B, theta, cfg)
    lams = _lambdas(cs, cfg)
    fit = robust_lasso(cs.y, cs.A, *lams)
    support, _ = declared_support(cs.y, cs.A, fit, cs.sigma_centered, cfg.support_alpha)
    return fit.beta_hat, support, {"fit": fit, "lambdas": lams}


def _detect(z, B, theta, cfg):
    cs, _ = _centered(z, B, theta, cfg)
    first = _lambdas(cs, cfg) if cfg.detector.lambda_mode == "grid_first" else None
    det = detect_mmes(cs.y, cs.A, theta, cfg.r_U, cfg.alpha, cs.sigma_centered, cs.pairing, _settings(cfg, first))
    keep = np.setdiff1d(np.arange(cs.n_prime), det.J)
    return cs, det, keep


def pipeline_mmer(z, B, theta, cfg):
    cs, det, keep = _detect(z, B, theta, cfg)
    support, _ = declared_support(cs.y[keep], cs.A[keep], det.fit, cs.sigma_centered, cfg.support_alpha)
    return det.fit.beta_hat, support, {"detection": det}


def pipeline_odrlt(z, B, theta, cfg):
    """Support decisions only; the returned estimate is the debiased signal."""
    cs, det, keep = _detect(z, B, theta, cfg)
    support, beta_w = declared_support(cs.y[keep], cs.A[keep], det.fit, cs.sigma_centered, cfg.support_alpha)
    return beta_w, support, {"detection": det}


def pipeline_cape(z, B, theta, cfg, B_true=None):
    sigma = effective_sigma(z, cfg.sigma_tilde, cfg.sigma_floor)
    detector = cfg.detector
    if detector.lambda_mode == "grid_first" and detector.lambdas is None:
        cs = center(z, B, theta, None, sigma)
        detector = _settings(cfg, _lambdas(cs, cfg))
    ccfg = CapeConfig(r_U=cfg.r_U, alpha=cfg.alpha, epsilon=cfg.epsilon, max_stages=cfg.max_stages, seed=cfg.seed,
                      stop_early=cfg.stop_early, perm_pool=cfg.perm_pool, detector=detector)
    result, fit = cape(z, B, theta, cfg.model, ccfg, sigma, B_true=B_true)
    cs = center(z, result.B_hat, theta, None, sigma)
    support, _ = declared_support(cs.y, cs.A, fit, cs.sigma_centered, cfg.support_alpha)
    return fit.beta_hat, support, {"correction": result, "fit": fit}


PIPELINES = {"RL": pipeline_rl, "MMER": pipeline_mmer, "CAPE": pipeline_cape, "ODRLT": pipeline_odrlt}
