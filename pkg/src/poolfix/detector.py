"""Debiased robust-lasso tests and the iterative mismatch-detection loop."""
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .debias import closed_form_W, debias_delta
from .errors import DegenerateError, DetectionLoopError, ParameterError
from .solver import LambdaGrid, RobustFit, robust_lasso, select_lambdas, theory_lambdas

LAMBDA_MODES = ("theory", "grid", "grid_first")


@dataclass
class DetectionResult:
    J: list
    stats: np.ndarray
    pvalues: np.ndarray
    rows_B: np.ndarray
    fit: RobustFit = None  # robust lasso on the unflagged rows
    passes: list = field(default_factory=list)  # flagged indices per pass
    lambdas: tuple = (float("nan"), float("nan"))

    @property
    def r_hat(self):
        return len(self.J)


def odrlt_test(dd, alpha, two_sided=True):
    """Per-index test of ``delta_i = 0``; returns ``(stats, pvalues, rejected)``.

    Two-sided (default): reject when ``stat > z_{alpha/2}``, ``p = 2(1 - Phi(stat))``.
    One-sided: ``p = 1 - Phi(stat)``, reject when ``p < alpha``.
    """
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    sd = np.asarray(dd.sigma_diag, dtype=float)
    if np.any(sd <= 0):
        raise DegenerateError("zero standard deviation in debiased mismatch estimate")
    stats = np.abs(dd.delta_w) / sd
    if two_sided:
        pvalues = 2.0 * norm.sf(stats)
        rejected = np.flatnonzero(stats > norm.isf(alpha / 2))
    else:
        pvalues = norm.sf(stats)
        rejected = np.flatnonzero(pvalues < alpha)
    return stats, pvalues, rejected


@dataclass
class DetectorSettings:
    lambda_mode: str = "theory"
    grid: LambdaGrid = None
    max_iter: int = 20
    two_sided: bool = True
    c_mu: float = 2.0
    smoother: str = "ap"
    lambdas: tuple = None  # fixed pair, overrides lambda_mode


def _lambdas(y, A, sigma, theta, n_full, r_hat, settings, first):
    if settings.lambdas is not None:
        return settings.lambdas
    if settings.lambda_mode == "theory" or (settings.lambda_mode == "grid_first" and first is not None):
        if settings.lambda_mode == "grid_first":
            return first
        return theory_lambdas(sigma, A.shape[1], n_full, r_hat)
    grid = settings.grid or LambdaGrid()
    return select_lambdas(y, A, grid, sigma, theta, r_hat=r_hat, smoother=settings.smoother)


def _pass(y, A, theta, alpha, sigma, lams, settings):
    fit = robust_lasso(y, A, *lams)
    op = closed_form_W(A, theta, c_mu=settings.c_mu, smoother=settings.smoother, allow_zero_rows=True)
    dd = debias_delta(y, A, op, fit, sigma)
    stats, pvals, rej = odrlt_test(dd, alpha, settings.two_sided)
    return fit, stats, pvals, rej


def detect_mmes(y, A, theta, r_U, alpha, sigma, pairing=None, settings=None):
    """Iteratively flag centered measurements carrying mismatch errors.

    A first test pass on all rows gives ``J``; while ``|J| < r_U`` the test is
    rerun on the unflagged rows and new rejections are added, until a pass
    rejects nothing. If ``|J|`` overshoots ``r_U`` only the ``r_U`` largest
    statistics are kept.
    """
    settings = settings or DetectorSettings()
    if settings.lambda_mode not in LAMBDA_MODES:
        raise ParameterError(f"unknown lambda mode {settings.lambda_mode!r}")
    y = np.asarray(y, dtype=float)
    A = np.asarray(A, dtype=float)
    n = len(y)
    if not 0 <= r_U < n:
        raise ParameterError(f"need 0 <= r_U < n' = {n}, got {r_U}")

    stats = np.zeros(n)
    pvalues = np.ones(n)
    lams = _lambdas(y, A, sigma, theta, n, 0, settings, None)
    first = lams
    _, s, pv, rej = _pass(y, A, theta, alpha, sigma, lams, settings)
    stats[:], pvalues[:] = s, pv
    J = [int(i) for i in rej]
    passes = [list(J)]
    for _ in range(settings.max_iter):
        # an empty pass would repeat itself on the same rows
        if len(J) >= r_U or not J:
            break
        keep = np.setdiff1d(np.arange(n), J)
        lams = _lambdas(y[keep], A[keep], sigma, theta, n, len(J), settings, first)
        _, s, pv, rej = _pass(y[keep], A[keep], theta, alpha, sigma, lams, settings)
        stats[keep], pvalues[keep] = s, pv
        new = [int(keep[i]) for i in rej]
        passes.append(new)
        if not new:
            break
        J.extend(new)
    else:
        if len(J) < r_U:
            raise DetectionLoopError(f"detection loop exceeded {settings.max_iter} iterations")
    if len(J) > r_U:
        order = sorted(J, key=lambda i: (-stats[i], i))
        J = order[:r_U]
    J = sorted(J)

    keep = np.setdiff1d(np.arange(n), J)
    lams = _lambdas(y[keep], A[keep], sigma, theta, n, len(J), settings, first)
    fit = robust_lasso(y[keep], A[keep], *lams)
    rows_B = np.sort(pairing[J].ravel()) if pairing is not None and J else np.empty(0, dtype=int)
    return DetectionResult(J=J, stats=stats, pvalues=pvalues, rows_B=rows_B, fit=fit, passes=passes, lambdas=lams)
