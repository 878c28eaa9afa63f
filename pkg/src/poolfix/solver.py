"""Lasso / Robust Lasso by coordinate descent, KKT checks and lambda selection.

Both programs use the ``1/(2n)`` loss scaling with ``n`` the number of rows
of the system actually fitted::

    lasso:         (1/2n)||y - A b||^2 + lam ||b||_1
    robust lasso:  (1/2n)||y - A b - d||^2 + lam1 ||b||_1 + lam2 ||d||_1
"""
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.stats import norm

from .errors import ConvergenceError, InfeasibleError, ParameterError
from .rng import stream

TOL_REL = 1e-8
KKT_TOL = 1e-8
MAX_SWEEPS = 100_000


@dataclass
class RobustFit:
    beta_hat: np.ndarray
    delta_hat: np.ndarray
    lambda1: float
    lambda2: float
    iterations: int
    kkt_gap: float
    objective: float


@dataclass
class LambdaGrid:
    log_min: float = 1.0
    log_max: float = 7.0
    step: float = 0.25
    lilliefors_alpha: float = 0.01
    gaussian_fraction_threshold: float = 0.70
    cv_folds: int = 10

    def __post_init__(self):
        if self.log_max < self.log_min or self.step <= 0:
            raise ParameterError("lambda grid is empty")
        for name in ("lilliefors_alpha", "gaussian_fraction_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ParameterError(f"{name} must lie in (0, 1)")

    def values(self):
        k = int(math.floor((self.log_max - self.log_min) / self.step + 1e-9)) + 1
        return np.exp(self.log_min + self.step * np.arange(k))


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _objective(r, beta, delta, lam1, lam2, n):
    return 0.5 * np.dot(r, r) / n + lam1 * np.sum(np.abs(beta)) + lam2 * np.sum(np.abs(delta))


@njit(cache=True)
def _kkt(A, r, beta, delta, lam1, lam2, with_delta):
    n, p = A.shape
    worst = 0.0
    for j in range(p):
        g = np.dot(A[:, j], r) / n
        if beta[j] > 0:
            v = abs(g - lam1)
        elif beta[j] < 0:
            v = abs(g + lam1)
        else:
            v = max(0.0, abs(g) - lam1)
        worst = max(worst, v)
    if with_delta:
        for i in range(n):
            g = r[i] / n
            if delta[i] > 0:
                v = abs(g - lam2)
            elif delta[i] < 0:
                v = abs(g + lam2)
            else:
                v = max(0.0, abs(g) - lam2)
            worst = max(worst, v)
    return worst


@njit(cache=True)
def _cd(y, A, lam1, lam2, beta, delta, with_delta, tol_rel, kkt_tol, max_sweeps, check_monotone):
    """Cyclic coordinate descent; beta/delta are updated in place.

    Returns (sweeps, kkt_gap, status) with status 0 converged, 1 budget
    exhausted, 2 objective increased (only when check_monotone).
    """
    n, p = A.shape
    col_sq = np.empty(p)
    for j in range(p):
        col_sq[j] = np.dot(A[:, j], A[:, j]) / n
    r = y - A @ beta - delta
    thr_delta = n * lam2
    prev_obj = _objective(r, beta, delta, lam1, lam2, n)
    gap = np.inf
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        max_abs = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                if beta[j] != 0.0:
                    beta[j] = 0.0
                continue
            old = beta[j]
            acc = 0.0
            for i in range(n):
                acc += A[i, j] * r[i]
            rho = acc / n + col_sq[j] * old
            new = _soft(rho, lam1) / col_sq[j]
            if new != old:
                step = new - old
                for i in range(n):
                    r[i] -= step * A[i, j]
                beta[j] = new
                max_change = max(max_change, abs(new - old))
            max_abs = max(max_abs, abs(new))
        if with_delta:
            for i in range(n):
                old = delta[i]
                new = _soft(r[i] + old, thr_delta)
                if new != old:
                    r[i] -= new - old
                    delta[i] = new
                    max_change = max(max_change, abs(new - old))
                max_abs = max(max_abs, abs(new))
        if check_monotone:
            obj = _objective(r, beta, delta, lam1, lam2, n)
            if obj > prev_obj * (1.0 + 1e-12) + 1e-12:
                return sweep, gap, 2
            prev_obj = obj
        if max_change < tol_rel * (1.0 + max_abs):
            r = y - A @ beta - delta
            gap = _kkt(A, r, beta, delta, lam1, lam2, with_delta)
            if gap <= kkt_tol:
                return sweep, gap, 0
    r = y - A @ beta - delta
    gap = _kkt(A, r, beta, delta, lam1, lam2, with_delta)
    return max_sweeps, gap, 1


def _polish(y, A, beta, delta, lam1, lam2, with_delta):
    """Exact solve of the stationarity equations on the current active set and signs.

    Returns ``(beta, delta)`` when the solution keeps every sign, else None.
    """
    n = len(y)
    sb = np.flatnonzero(beta)
    sd = np.flatnonzero(delta) if with_delta else np.empty(0, dtype=np.int64)
    if sb.size + sd.size == 0:
        return None
    X = np.hstack([A[:, sb], np.eye(n)[:, sd]])
    signs = np.concatenate([np.sign(beta[sb]), np.sign(delta[sd])])
    w = np.concatenate([np.full(sb.size, lam1), np.full(sd.size, lam2)]) * signs
    sol = np.linalg.lstsq(X.T @ X, X.T @ y - n * w, rcond=None)[0]
    if np.any(np.sign(sol) != signs):
        return None
    b = np.zeros_like(beta)
    d = np.zeros_like(delta)
    b[sb] = sol[:sb.size]
    d[sd] = sol[sb.size:]
    return b, d


def _solve(y, A, lam1, lam2, beta, delta, with_delta, tol_rel, kkt_tol, max_sweeps, debug):
    """Coordinate descent in chunks; between chunks try an active-set polish.

    Cyclic descent converges only linearly on correlated designs; once the
    active set and signs have settled the polish lands on the exact optimum.
    """
    done, chunk, gap = 0, 200, np.inf
    while done < max_sweeps:
        sweeps, gap, status = _cd(y, A, lam1, lam2, beta, delta, with_delta, tol_rel, kkt_tol,
                                  min(chunk, max_sweeps - done), debug)
        done += sweeps
        if status != 1:
            return done, gap, status
        polished = _polish(y, A, beta, delta, lam1, lam2, with_delta)
        if polished is not None:
            b, d = polished
            g = _kkt(A, y - A @ b - d, b, d, lam1, lam2, with_delta)
            if g <= kkt_tol:
                beta[:], delta[:] = b, d
                return done, g, 0
        chunk = min(2 * chunk, 5000)
    return done, gap, 1


def _prepare(y, A):
    y = np.ascontiguousarray(y, dtype=float)
    A = np.asfortranarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != y.shape[0]:
        raise ParameterError(f"A has {A.shape[0]} rows but y has length {y.shape[0]}")
    return y, A


def objective(y, A, beta, delta, lam1, lam2):
    """Robust-Lasso objective; pass ``delta=0`` and ``lam2=0`` for the Lasso."""
    n = len(y)
    r = y - A @ beta - delta
    return 0.5 * float(r @ r) / n + lam1 * float(np.abs(beta).sum()) + lam2 * float(np.abs(delta).sum())


def lasso(y, A, lam, beta0=None, tol_rel=TOL_REL, kkt_tol=KKT_TOL, max_sweeps=MAX_SWEEPS, debug=False):
    """Minimize ``(1/2n)||y - A b||^2 + lam ||b||_1``; returns the coefficient vector."""
    if lam < 0:
        raise ParameterError("lambda must be non-negative")
    y, A = _prepare(y, A)
    beta = np.zeros(A.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    delta = np.zeros(len(y))
    sweeps, gap, status = _solve(y, A, float(lam), 0.0, beta, delta, False, tol_rel, kkt_tol, max_sweeps, debug)
    if status == 2:
        raise AssertionError("coordinate descent objective increased")
    if status == 1:
        raise ConvergenceError(f"lasso did not converge in {max_sweeps} sweeps (kkt gap {gap:.3g})", gap)
    return beta


def robust_lasso(y, A, lambda1, lambda2, beta0=None, delta0=None, tol_rel=TOL_REL, kkt_tol=KKT_TOL,
                 max_sweeps=MAX_SWEEPS, debug=False):
    """Joint sparse fit of signal ``beta`` and gross-error vector ``delta``.

    Each sweep updates every beta coordinate by soft-thresholding and then
    every delta coordinate in closed form. Warm starts via ``beta0``/``delta0``.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ParameterError("regularization parameters must be non-negative")
    y, A = _prepare(y, A)
    n, p = A.shape
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    delta = np.zeros(n) if delta0 is None else np.array(delta0, dtype=float)
    sweeps, gap, status = _solve(y, A, float(lambda1), float(lambda2), beta, delta, True, tol_rel, kkt_tol,
                                 max_sweeps, debug)
    if status == 2:
        raise AssertionError("coordinate descent objective increased")
    if status == 1:
        raise ConvergenceError(f"robust lasso did not converge in {max_sweeps} sweeps (kkt gap {gap:.3g})", gap)
    return RobustFit(
        beta_hat=beta,
        delta_hat=delta,
        lambda1=float(lambda1),
        lambda2=float(lambda2),
        iterations=int(sweeps),
        kkt_gap=float(gap),
        objective=objective(y, A, beta, delta, lambda1, lambda2),
    )


def kkt_residual(y, A, fit, lam=None):
    """Largest subgradient-optimality violation of a fit.

    ``fit`` is a :class:`RobustFit` or a plain Lasso coefficient vector (then
    ``lam`` is required). Zero iff the fit is exactly optimal.
    """
    y = np.asarray(y, dtype=float)
    A = np.asarray(A, dtype=float)
    n = len(y)
    if isinstance(fit, RobustFit):
        beta, delta, l1, l2, with_delta = fit.beta_hat, fit.delta_hat, fit.lambda1, fit.lambda2, True
    else:
        if lam is None:
            raise ParameterError("lam is required for a plain lasso fit")
        beta, delta, l1, l2, with_delta = np.asarray(fit, dtype=float), np.zeros(n), lam, 0.0, False
    r = y - A @ beta - delta

    def block(g, x, lam_):
        v = np.where(x > 0, np.abs(g - lam_), np.where(x < 0, np.abs(g + lam_), np.maximum(0.0, np.abs(g) - lam_)))
        return float(v.max(initial=0.0))

    worst = block(A.T @ r / n, beta, l1)
    if with_delta:
        worst = max(worst, block(r / n, delta, l2))
    return worst


def theory_lambdas(sigma, p, n_prime, r_hat=0):
    """Default pair ``4 sigma sqrt(log p / (n'-r))`` and ``4 sigma sqrt(log n') / (n'-r)``."""
    m = n_prime - r_hat
    if m <= 0:
        raise ParameterError("need more rows than flagged indices")
    lam1 = 4.0 * sigma * math.sqrt(math.log(p)) / math.sqrt(m)
    lam2 = 4.0 * sigma * math.sqrt(math.log(n_prime)) / m
    return lam1, lam2


# -- Lilliefors ---------------------------------------------------------------


def _ks_normal(x):
    m = len(x)
    cdf = norm.cdf(np.sort(x))
    i = np.arange(1, m + 1)
    return max(float(np.max(i / m - cdf)), float(np.max(cdf - (i - 1) / m)))


@lru_cache(maxsize=64)
def _lilliefors_null(m, replicates, seed):
    rng = stream(seed, "lilliefors", m)
    out = np.empty(replicates)
    for k in range(replicates):
        x = rng.standard_normal(m)
        out[k] = _ks_normal((x - x.mean()) / x.std(ddof=1))
    out.setflags(write=False)
    return out


def lilliefors_pvalue(sample, replicates=2000, seed=20240601):
    """Monte-Carlo Lilliefors p-value for normality with estimated mean/std."""
    x = np.asarray(sample, dtype=float)
    if len(x) < 8:
        raise ParameterError("Lilliefors test needs at least 8 observations")
    sd = x.std(ddof=1)
    if not np.isfinite(sd) or sd <= 0:
        return 0.0
    d = _ks_normal((x - x.mean()) / sd)
    null = _lilliefors_null(len(x), replicates, seed)
    return float((1 + np.count_nonzero(null >= d)) / (1 + replicates))


# -- lambda selection ---------------------------------------------------------


def gaussian_screen(standardized, grid):
    """Stage-1 screen on standardized debiased coordinates."""
    z = np.asarray(standardized, dtype=float)
    if not np.all(np.isfinite(z)) or len(z) < 8:
        return False
    frac = np.mean(np.abs(z) <= norm.ppf(0.995))
    return bool(frac >= grid.gaussian_fraction_threshold and lilliefors_pvalue(z) >= grid.lilliefors_alpha)


def cv_error(y, A, lam1, lam2, folds, seed=0, max_sweeps=20_000):
    """Mean K-fold CV prediction error of robust-lasso beta on held-out rows.

    A fold fit that does not converge makes the pair ineligible (``inf``).
    """
    n = len(y)
    k = min(folds, n)
    assign = stream(seed, "cv", n).permutation(n) % k
    errs = []
    for f in range(k):
        test = assign == f
        train = ~test
        try:
            fit = robust_lasso(y[train], A[train], lam1, lam2, max_sweeps=max_sweeps)
        except ConvergenceError:
            return math.inf
        resid = y[test] - A[test] @ fit.beta_hat
        errs.append(float(np.mean(resid ** 2)))
    return float(np.mean(errs))


def _cv_path(y, A, pairs, folds, seed=0, max_sweeps=20_000):
    """``[(cv_error, lam1, lam2)]`` for many pairs, warm-starting each fold along the path."""
    n = len(y)
    k = min(folds, n)
    assign = stream(seed, "cv", n).permutation(n) % k
    order = sorted(range(len(pairs)), key=lambda i: (-pairs[i][0], -pairs[i][1]))
    errs = np.zeros(len(pairs))
    for f in range(k):
        test = assign == f
        train = ~test
        warm_b, warm_d = None, None
        for i in order:
            if not np.isfinite(errs[i]):
                continue
            try:
                fit = robust_lasso(y[train], A[train], *pairs[i], beta0=warm_b, delta0=warm_d,
                                   max_sweeps=max_sweeps)
            except ConvergenceError:
                errs[i] = math.inf
                continue
            warm_b, warm_d = fit.beta_hat, fit.delta_hat
            resid = y[test] - A[test] @ fit.beta_hat
            errs[i] += float(np.mean(resid ** 2)) / k
    return [(float(e), l1, l2) for e, (l1, l2) in zip(errs, pairs)]


def select_lambdas(y, A, grid, sigma, theta, r_hat=0, seed=0, smoother="ap"):
    """Two-stage grid selection of ``(lambda1, lambda2)``.

    Stage 1 keeps pairs whose standardized debiased delta passes
    :func:`gaussian_screen`; stage 2 picks the kept pair with the smallest
    mean CV error. Falls back to :func:`theory_lambdas` when nothing survives.
    """
    from .debias import closed_form_W, debias_delta

    y = np.asarray(y, dtype=float)
    A = np.asarray(A, dtype=float)
    n, p = A.shape
    values = grid.values()[::-1]
    if len(values) == 1:
        return float(values[0]), float(values[0])
    try:
        op = closed_form_W(A, theta, smoother=smoother, allow_zero_rows=True)
    except InfeasibleError:
        op = None
    kept = []
    if op is not None:
        for lam1 in values:
            warm_b, warm_d = None, None
            for lam2 in values:
                try:
                    fit = robust_lasso(y, A, lam1, lam2, beta0=warm_b, delta0=warm_d, max_sweeps=20_000)
                except ConvergenceError:
                    continue
                warm_b, warm_d = fit.beta_hat, fit.delta_hat
                dd = debias_delta(y, A, op, fit, sigma)
                if gaussian_screen(dd.delta_w / dd.sigma_diag, grid):
                    kept.append((float(lam1), float(lam2)))
    if not kept:
        return theory_lambdas(sigma, p, n, r_hat)
    scored = _cv_path(y, A, kept, grid.cv_folds, seed)
    scored.sort(key=lambda t: (t[0], -t[1], -t[2]))
    return scored[0][1], scored[0][2]
