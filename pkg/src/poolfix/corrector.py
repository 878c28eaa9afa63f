"""Model-based row correction by absolute prediction error, single and multi-stage."""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorSettings, detect_mmes
from .errors import ParameterError, PoolfixError
from .rng import stream
from .simkit import MODELS, center
from .solver import LambdaGrid, lasso, robust_lasso, select_lambdas, theory_lambdas


@dataclass
class PerturbationSet:
    row: int
    model: str
    candidates: np.ndarray  # (k, p); row 0 is the unperturbed row


@dataclass
class Decision:
    stage: int
    row: int
    model: str
    chosen_index: int
    ape_original: float
    ape_chosen: float
    ape_runner_up: float


@dataclass
class StageInfo:
    stage: int
    J: list
    rows: list
    f_ape: float
    n_changed: int
    # filled only when the true executed matrix is supplied
    n_wrong: int = -1
    n_true_flag: int = -1
    n_false_flag: int = -1


@dataclass
class CorrectionResult:
    B_hat: np.ndarray
    decisions: list
    f_ape_trace: list
    stages_run: int
    f_ape_initial: float = float("nan")
    stages: list = field(default_factory=list)
    fit = None


def build_perturbation_set(B, i, model, flagged_rows=(), perm_pool="flagged"):
    """All allowable perturbations of row ``i`` (the row itself first)."""
    if model not in MODELS:
        raise ParameterError(f"unknown MME model {model!r}")
    B = np.asarray(B)
    b = B[i]
    p = len(b)
    out = [b.copy()]
    if model == "SSM":
        flips = np.repeat(b[None, :], p, axis=0)
        idx = np.arange(p)
        flips[idx, idx] = 1 - b
        out.extend(flips)
    elif model == "ASM":
        for j in range(p):
            jp = (j + 1) % p
            if b[j] != b[jp]:
                c = b.copy()
                c[j], c[jp] = b[jp], b[j]
                out.append(c)
    else:
        pool = range(B.shape[0]) if perm_pool == "all" else sorted(set(int(k) for k in flagged_rows))
        out.extend(B[k].copy() for k in pool if k != i)
    return PerturbationSet(row=int(i), model=model, candidates=np.array(out, dtype=B.dtype).reshape(len(out), p))


def ape(z_i, candidate_row, beta_hat):
    return abs(z_i - float(np.dot(candidate_row, beta_hat)))


def _ape_all(z_i, cset, beta_hat):
    # prediction = base + (candidate - base) . beta, so candidates differing
    # only on zero coefficients tie exactly with the unperturbed row
    base = float(cset.candidates[0] @ beta_hat)
    diff = (cset.candidates.astype(float) - cset.candidates[0]) @ beta_hat
    return np.abs(z_i - (base + diff))


def correct_rows(z, B, flagged_rows, beta_hat, model, perm_pool="flagged", stage=0):
    """Replace each flagged row by its minimum-APE perturbation.

    Ties go to the unperturbed row, then to the lowest candidate index.
    Returns ``(B_hat, decisions)``.
    """
    B = np.asarray(B)
    B_hat = B.copy()
    flagged = sorted(set(int(k) for k in flagged_rows))
    decisions = []
    for i in flagged:
        cset = build_perturbation_set(B, i, model, flagged, perm_pool)
        apes = _ape_all(z[i], cset, beta_hat)
        k = int(np.argmin(apes))
        others = np.delete(apes, k)
        runner = float(others.min()) if others.size else float("nan")
        B_hat[i] = cset.candidates[k]
        decisions.append(Decision(stage, i, model, k, float(apes[0]), float(apes[k]), runner))
    return B_hat, decisions


def f_ape(z, B_hat, beta_lasso):
    r = np.asarray(z, dtype=float) - B_hat @ beta_lasso
    return float(r @ r) / len(r)


def fape_lambda(sigma_tilde, n, p, theta):
    """Lasso penalty for the stopping function fit on the uncentered system."""
    return 4.0 * sigma_tilde * math.sqrt(theta * math.log(p) / n)


def stopping_value(z, B_hat, lam, beta0=None):
    beta = lasso(z, B_hat.astype(float), lam, beta0=beta0)
    return f_ape(z, B_hat, beta), beta


@dataclass
class CapeConfig:
    r_U: int
    alpha: float = 0.05
    epsilon: float = None  # absolute; None -> rel_epsilon * initial f_ape
    rel_epsilon: float = 1e-3
    max_stages: int = 10
    seed: int = 0
    stop_early: bool = True
    perm_pool: str = "flagged"
    detector: DetectorSettings = field(default_factory=DetectorSettings)


def cape(z, B, theta, model, cfg, sigma_tilde, B_true=None):
    """Multi-stage detect-and-correct loop.

    Every stage reshuffles the row pairing, reruns detection on the current
    corrected matrix, corrects the flagged rows and evaluates the stopping
    function. Stops once consecutive stopping values differ by at most
    epsilon (or after ``max_stages``). ``B_true`` only feeds diagnostics.
    A solver failure inside a stage propagates with the partial
    :class:`CorrectionResult` attached as ``exc.partial``.

    Returns ``(CorrectionResult, final robust-lasso fit on the corrected system)``.
    """
    z = np.asarray(z, dtype=float)
    B = np.asarray(B)
    n, p = B.shape
    lam_f = fape_lambda(max(sigma_tilde, 1e-12), n, p, theta)
    f_prev, beta_f = stopping_value(z, B, lam_f)
    eps = cfg.epsilon if cfg.epsilon is not None else cfg.rel_epsilon * f_prev
    result = CorrectionResult(B_hat=B.copy(), decisions=[], f_ape_trace=[], stages_run=0, f_ape_initial=f_prev)
    B_hat = B.copy()
    for k in range(1, cfg.max_stages + 1):
        order = stream(cfg.seed, "shuffle", k).permutation(n)
        cs = center(z, B_hat, theta, order, sigma_tilde)
        try:
            det = detect_mmes(cs.y, cs.A, theta, cfg.r_U, cfg.alpha, cs.sigma_centered, cs.pairing, cfg.detector)
        except PoolfixError as exc:
            # keep the stages completed so far for the caller
            result.B_hat = B_hat
            exc.partial = result
            raise
        rows = [int(i) for i in det.rows_B]
        info = StageInfo(stage=k, J=list(det.J), rows=rows, f_ape=float("nan"), n_changed=0)
        if B_true is not None:
            wrong = set(np.flatnonzero(np.any(B_hat != B_true, axis=1)).tolist())
            info.n_wrong = len(wrong)
            info.n_true_flag = len(wrong.intersection(rows))
            info.n_false_flag = len(rows) - info.n_true_flag
        new_B, decisions = correct_rows(z, B_hat, rows, det.fit.beta_hat, model, cfg.perm_pool, stage=k)
        info.n_changed = int(np.sum(np.any(new_B != B_hat, axis=1)))
        B_hat = new_B
        f_k, beta_f = stopping_value(z, B_hat, lam_f, beta_f)
        info.f_ape = f_k
        result.decisions.extend(decisions)
        result.f_ape_trace.append(f_k)
        result.stages.append(info)
        result.stages_run = k
        if cfg.stop_early and abs(f_k - f_prev) <= eps:
            break
        f_prev = f_k
    result.B_hat = B_hat
    cs = center(z, B_hat, theta, None, sigma_tilde)
    d = cfg.detector
    if d.lambdas is not None:
        lams = d.lambdas
    elif d.lambda_mode == "grid":
        lams = select_lambdas(cs.y, cs.A, d.grid or LambdaGrid(), cs.sigma_centered, theta, smoother=d.smoother)
    else:
        lams = theory_lambdas(cs.sigma_centered, p, cs.n_prime, 0)
    fit = robust_lasso(cs.y, cs.A, *lams)
    result.fit = fit
    return result, fit


def dump_decisions(decisions):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "row", "model", "chosen_index", "ape_original", "ape_chosen", "ape_runner_up"])
    for d in decisions:
        w.writerow([d.stage, d.row, d.model, d.chosen_index, repr(d.ape_original), repr(d.ape_chosen),
                    repr(d.ape_runner_up)])
    return buf.getvalue()
