"""Closed-form debiasing matrix for centered Bernoulli designs.

For a centered design ``A`` (n' x p) the rows of the optimal debiasing matrix
are ``w_i = p (1 - mu3) / ||a_i||^2 * a_i``. The smoothing matrix used for the
debiased mismatch estimate is ``M = A W^T / p`` by default, whose diagonal is
exactly ``1 - mu3``.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, InfeasibleError, ParameterError
from .simkit import scale_h

SMOOTHERS = ("ap", "wa_n", "aw_n")


@dataclass
class DebiasOperator:
    W: np.ndarray
    mu1: float
    mu2: float
    mu3: float
    h: float
    tau: float
    M: np.ndarray
    residual_maker: np.ndarray
    smoother: str = "ap"
    radii: str = "main"

    @property
    def feasible(self):
        return self.tau / (1.0 + self.tau) <= self.mu3 + 1e-12


@dataclass
class DebiasedDelta:
    delta_w: np.ndarray
    sigma_diag: np.ndarray


def radii(n_prime, p, theta, c_mu=2.0, kind="main"):
    """Constraint radii ``(c0, mu1, mu2, mu3)``.

    ``kind="main"`` gives the unscaled radii; ``kind="h"`` multiplies them by
    powers of ``h = 1/(2 theta (1-theta))``.
    """
    if kind not in ("main", "h"):
        raise ParameterError(f"unknown radii kind {kind!r}")
    h = scale_h(theta)
    h2, h3 = (h * h, h ** 3) if kind == "h" else (1.0, 1.0)
    c0 = 1.0 + h2 * math.sqrt(math.log(p) / n_prime)
    mu1 = 2.0 * h2 * math.sqrt(2.0 * math.log(p) / n_prime)
    mu2 = 4.0 * h3 * math.sqrt(math.log(2.0 * n_prime * p) / (n_prime * p)) + 1.0 / n_prime
    mu3 = c_mu * h2 * math.sqrt(2.0 * math.log(n_prime) / p)
    return c0, mu1, mu2, mu3


def coherence(A):
    """``max_{i != k} |a_i . a_k| / ||a_i||^2`` over nonzero rows."""
    G = A @ A.T
    d = np.diag(G).copy()
    if len(d) < 2:
        return 0.0
    ratio = np.abs(G) / np.where(d > 0, d, np.inf)[:, None]
    np.fill_diagonal(ratio, 0.0)
    return float(ratio.max())


def smoothing_matrix(A, W, kind="ap"):
    n, p = A.shape
    if kind == "ap":
        return A @ W.T / p
    if kind == "wa_n":
        return W @ A.T / n
    if kind == "aw_n":
        return A @ W.T / n
    raise ParameterError(f"unknown smoother {kind!r}")


def closed_form_W(A, theta, c_mu=2.0, radii_kind="main", smoother="ap", allow_zero_rows=False):
    """Closed-form debiasing operator for the centered design ``A``.

    Zero rows (two identical paired rows) raise :class:`DegenerateError`
    unless ``allow_zero_rows``; they then get ``w_i = 0``, so the residual
    maker leaves that coordinate untouched.
    """
    A = np.asarray(A, dtype=float)
    n, p = A.shape
    row_sq = np.einsum("ij,ij->i", A, A)
    zero = row_sq == 0
    if np.any(zero) and not allow_zero_rows:
        raise DegenerateError(f"design has {int(zero.sum())} zero row(s)")
    _, mu1, mu2, mu3 = radii(n, p, theta, c_mu, radii_kind)
    if mu3 >= 1.0:
        raise InfeasibleError(f"mu3 = {mu3:.4g} >= 1: p={p} too small for n'={n}")
    scale = np.where(zero, 0.0, p * (1.0 - mu3) / np.where(zero, 1.0, row_sq))
    W = scale[:, None] * A
    M = smoothing_matrix(A, W, smoother)
    return DebiasOperator(
        W=W, mu1=mu1, mu2=mu2, mu3=mu3, h=scale_h(theta), tau=coherence(A), M=M,
        residual_maker=np.eye(n) - M, smoother=smoother, radii=radii_kind,
    )


def verify_constraints(W, A, theta, c_mu=2.0, radii_kind="main"):
    """Evaluate the four feasibility constraints of the debiasing program.

    Returns ``{name: (lhs, radius, passed)}`` for ``C0`` .. ``C3``.
    """
    W = np.asarray(W, dtype=float)
    A = np.asarray(A, dtype=float)
    n, p = A.shape
    c0, mu1, mu2, mu3 = radii(n, p, theta, c_mu, radii_kind)
    AW = A @ W.T
    lhs = {
        "C0": float(np.max(np.einsum("ij,ij->j", W, W)) / n),
        "C1": float(np.max(np.abs(np.eye(p) - W.T @ A / n))),
        "C2": float(np.max(np.abs((np.eye(n) - AW / n) @ A)) / p),
        "C3": float(np.max(np.abs(AW / p - np.eye(n)))),
    }
    rad = {"C0": c0, "C1": mu1, "C2": mu2, "C3": mu3}
    # C3 is attained with equality on the diagonal; allow rounding slack
    return {k: (lhs[k], rad[k], lhs[k] <= rad[k] * (1 + 1e-10) + 1e-12) for k in lhs}


def debias_delta(y, A, op, fit, sigma):
    """Debiased mismatch estimate and its per-coordinate standard deviation."""
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    resid = np.asarray(y, dtype=float) - A @ fit.beta_hat - fit.delta_hat
    R = op.residual_maker
    delta_w = fit.delta_hat + R @ resid
    sigma_diag = sigma * np.sqrt(np.einsum("ij,ij->i", R, R))
    return DebiasedDelta(delta_w=delta_w, sigma_diag=sigma_diag)


def debias_beta(y, A, beta_hat, sigma, c_mu=2.0, allow_zero_columns=False):
    """Column-wise debiased signal estimate ``(beta_w, se)``.

    The shrinkage constant is ``mu = c_mu sqrt(2 log p / n')``, clipped to 1.
    At ``mu = 1`` the debiasing matrix is zero: ``beta_w = beta_hat`` with zero
    standard error, so z-tests reduce to the support of ``beta_hat``.

    Zero columns raise :class:`DegenerateError` unless ``allow_zero_columns``,
    in which case they keep ``beta_hat`` with an infinite standard error.
    """
    A = np.asarray(A, dtype=float)
    n, p = A.shape
    col_sq = np.einsum("ij,ij->j", A, A)
    zero = col_sq == 0
    if np.any(zero) and not allow_zero_columns:
        raise DegenerateError(f"design has {int(zero.sum())} zero column(s)")
    mu = c_mu * math.sqrt(2.0 * math.log(p) / n)
    mu = min(mu, 1.0)
    safe = np.where(zero, 1.0, col_sq)
    resid = np.asarray(y, dtype=float) - A @ beta_hat
    beta_w = beta_hat + np.where(zero, 0.0, (1.0 - mu) * (A.T @ resid) / safe)
    se = np.where(zero, np.inf, sigma * (1.0 - mu) / np.sqrt(safe))
    return beta_w, se
