"""Pooling-system generation, mismatch injection, measurement noise and centering."""
import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, ParameterError
from .rng import stream

MODELS = ("SSM", "ASM", "PERM")
NOISE_KINDS = ("none", "gaussian", "lognormal_pcr")
RETRY_BUDGET = 1000


@dataclass
class PoolingSystem:
    n: int
    p: int
    theta: float
    B: np.ndarray
    seed: int = 0


@dataclass
class SignalVector:
    beta: np.ndarray
    support: np.ndarray

    @property
    def s(self):
        return len(self.support)


@dataclass(frozen=True)
class MmeRecord:
    """One injected mismatch.

    ``detail`` is the flipped column (SSM), the swap position ``j`` whose
    partner is ``(j + 1) % p`` (ASM), or the partner row (PERM). ``delta`` is
    the induced measurement error ``(b_tilde - b) @ beta``.
    """

    model: str
    row: int
    detail: int
    delta: float = 0.0


@dataclass
class MeasurementSet:
    z: np.ndarray
    noise_kind: str
    sigma_tilde: float
    f_sigma: float = 0.0
    q: float = 0.95
    # std of the PCR cycle discrepancy e_i (lognormal only)
    sigma_e: float = 0.0


@dataclass
class CenteredSystem:
    y: np.ndarray
    A: np.ndarray
    pairing: np.ndarray  # (n', 2) original row indices
    theta: float
    sigma_centered: float = float("nan")

    @property
    def h(self):
        return scale_h(self.theta)

    @property
    def n_prime(self):
        return self.A.shape[0]

    def rows_of(self, indices):
        """Original rows touched by the given centered indices."""
        idx = np.asarray(sorted(indices), dtype=int)
        if idx.size == 0:
            return np.empty(0, dtype=int)
        return np.sort(self.pairing[idx].ravel())


@dataclass
class NoiseConfig:
    kind: str = "gaussian"
    f_sigma: float = 0.01
    q: float = 0.95

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ParameterError(f"unknown noise kind {self.kind!r}")
        if self.f_sigma < 0:
            raise ParameterError("f_sigma must be non-negative")
        if self.kind == "lognormal_pcr" and not 0 < self.q < 1:
            raise ParameterError("q must lie in (0, 1)")


def scale_h(theta):
    return 1.0 / (2.0 * theta * (1.0 - theta))


def _check_theta(theta):
    if not 0.0 < theta < 1.0:
        raise ParameterError(f"theta must lie in (0, 1), got {theta}")


def gen_pooling(n, p, theta, seed):
    """Draw an ``n x p`` Bernoulli(theta) pooling matrix."""
    _check_theta(theta)
    if n < 2 or p <= n:
        raise ParameterError(f"need n >= 2 and p > n, got n={n}, p={p}")
    rng = stream(seed, "matrix")
    B = (rng.random((n, p)) < theta).astype(np.int8)
    return PoolingSystem(n=n, p=p, theta=theta, B=B, seed=seed)


def gen_signal(p, s, low=100.0, high=1000.0, seed=0):
    """Sparse non-negative signal with ``s`` distinct U(low, high) entries."""
    if s < 0 or s > p:
        raise ParameterError(f"sparsity s={s} must lie in [0, p={p}]")
    if not 0 < low < high:
        raise ParameterError("need 0 < low < high")
    rng = stream(seed, "signal")
    support = np.sort(rng.choice(p, size=s, replace=False))
    values = rng.uniform(low, high, size=s)
    while len(np.unique(values)) < s:
        values = rng.uniform(low, high, size=s)
    beta = np.zeros(p)
    beta[support] = values
    return SignalVector(beta=beta, support=support)


def apply_records(B, records):
    """Rebuild the corrupted matrix from ``B`` and a record list."""
    Bt = B.copy()
    p = B.shape[1]
    for rec in records:
        if rec.model == "SSM":
            Bt[rec.row, rec.detail] = 1 - B[rec.row, rec.detail]
        elif rec.model == "ASM":
            j, jp = rec.detail, (rec.detail + 1) % p
            Bt[rec.row, j], Bt[rec.row, jp] = B[rec.row, jp], B[rec.row, j]
        elif rec.model == "PERM":
            Bt[rec.row] = B[rec.detail]
        else:
            raise ParameterError(f"unknown MME model {rec.model!r}")
    return Bt


def _draw_records(B, beta, model, rows, rng, adversarial):
    n, p = B.shape
    support = np.flatnonzero(beta)
    records = []
    if model == "SSM":
        for i in rows:
            pool = support if adversarial else np.arange(p)
            if pool.size == 0:
                return None
            records.append((i, int(rng.choice(pool))))
    elif model == "ASM":
        for i in rows:
            b = B[i]
            nxt = np.roll(b, -1)
            ok = b != nxt
            if adversarial:
                ok &= beta != np.roll(beta, -1)
            pool = np.flatnonzero(ok)
            if pool.size == 0:
                return None
            records.append((i, int(rng.choice(pool))))
    elif model == "PERM":
        for a, b in zip(rows[0::2], rows[1::2]):
            records.append((a, b))
            records.append((b, a))
    else:
        raise ParameterError(f"unknown MME model {model!r}")
    return records


def inject_mmes(sys, beta, model, r, seed, adversarial=True):
    """Corrupt ``r`` rows of ``sys.B`` under ``model``.

    Returns ``(B_tilde, records)``. With ``adversarial`` every mismatch is
    effective and the induced errors are pairwise distinct; draws are
    repeated up to ``RETRY_BUDGET`` times to achieve this.
    """
    B = sys.B
    n, p = B.shape
    b = beta.beta if isinstance(beta, SignalVector) else np.asarray(beta, dtype=float)
    if model not in MODELS:
        raise ParameterError(f"unknown MME model {model!r}")
    if r < 0 or r >= n:
        raise ParameterError(f"need 0 <= r < n, got r={r}")
    if model == "PERM" and r % 2:
        raise ParameterError("PERM mismatches come in swapped pairs; r must be even")
    if r == 0:
        return B.copy(), []
    rng = stream(seed, "mme")
    clean = B @ b
    for _ in range(RETRY_BUDGET):
        rows = [int(i) for i in rng.choice(n, size=r, replace=False)]
        drawn = _draw_records(B, b, model, rows, rng, adversarial)
        if drawn is None:
            continue
        records = [MmeRecord(model, i, d) for i, d in drawn]
        Bt = apply_records(B, records)
        delta = Bt @ b - clean
        vals = delta[[rec.row for rec in records]]
        if adversarial:
            scale = max(1.0, float(np.abs(b).max(initial=0.0)))
            if np.any(np.abs(vals) <= 1e-9 * scale):
                continue
            sv = np.sort(vals)
            if np.any(np.diff(sv) <= 1e-9 * scale):
                continue
        records = [MmeRecord(rec.model, rec.row, rec.detail, float(v)) for rec, v in zip(records, vals)]
        return Bt, records
    raise InfeasibleError(
        f"could not draw {r} effective, distinct {model} mismatches in {RETRY_BUDGET} attempts"
    )


def margin_violations(records, sigma, k=3):
    """Records whose error is below the ``2(k+1)sigma`` detectability margin."""
    bound = 2 * (k + 1) * sigma
    return [rec for rec in records if abs(rec.delta) < bound]


def forward(B_tilde, beta, noise, seed):
    """Pooled measurements ``z`` of ``beta`` through the executed matrix."""
    b = beta.beta if isinstance(beta, SignalVector) else np.asarray(beta, dtype=float)
    if isinstance(noise, str):
        noise = NoiseConfig(kind=noise)
    clean = B_tilde @ b
    n = len(clean)
    mean_abs = float(np.mean(np.abs(clean)))
    rms = float(np.sqrt(np.mean(clean * clean)))
    rng = stream(seed, "noise")
    if noise.kind == "none":
        return MeasurementSet(z=clean.astype(float), noise_kind="none", sigma_tilde=0.0, f_sigma=0.0, q=noise.q)
    if noise.kind == "gaussian":
        sigma = noise.f_sigma * mean_abs
        z = clean + sigma * rng.standard_normal(n)
        return MeasurementSet(z=z, noise_kind="gaussian", sigma_tilde=sigma, f_sigma=noise.f_sigma, q=noise.q)
    # multiplicative PCR noise; sigma_tilde is its additive Gaussian approximation
    sigma_e = noise.f_sigma
    e = sigma_e * rng.standard_normal(n)
    z = clean * (1.0 + noise.q) ** e
    sigma = math.log1p(noise.q) * sigma_e * rms
    return MeasurementSet(
        z=z, noise_kind="lognormal_pcr", sigma_tilde=sigma, f_sigma=noise.f_sigma, q=noise.q, sigma_e=sigma_e
    )


def center(z, B, theta, row_order=None, sigma_tilde=float("nan")):
    """Pair row ``row_order[i]`` with ``row_order[n'+i]`` and difference them."""
    _check_theta(theta)
    z = np.asarray(z, dtype=float)
    n = len(z)
    if row_order is None:
        order = np.arange(n)
    else:
        order = np.asarray(row_order, dtype=int)
        if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
            raise ParameterError("row_order must be a permutation of range(n)")
    half = n // 2
    top, bottom = order[:half], order[half : 2 * half]
    c = 2.0 * theta * (1.0 - theta)
    y = (z[top] - z[bottom]) / c
    A = (B[top].astype(float) - B[bottom].astype(float)) / c
    sigma_c = sigma_tilde * math.sqrt(2.0) / c
    return CenteredSystem(y=y, A=A, pairing=np.column_stack([top, bottom]), theta=theta, sigma_centered=sigma_c)


def centered_delta(delta_tilde, pairing, theta):
    """Centered mismatch vector induced by per-row errors ``delta_tilde``."""
    d = np.asarray(delta_tilde, dtype=float)
    return (d[pairing[:, 0]] - d[pairing[:, 1]]) / (2.0 * theta * (1.0 - theta))


def delta_vector(records, n):
    d = np.zeros(n)
    for rec in records:
        d[rec.row] = rec.delta
    return d


# -- text serialization -------------------------------------------------------


def dump_matrix(B):
    return "".join("".join("1" if v else "0" for v in row) + "\n" for row in np.asarray(B))


def load_matrix(text):
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 0), dtype=np.int8)
    if any(set(r) - {"0", "1"} for r in rows) or len({len(r) for r in rows}) != 1:
        raise ParameterError("matrix text must be equal-length lines of 0/1")
    return np.array([[c == "1" for c in r] for r in rows], dtype=np.int8)


def dump_records(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "row", "detail"])
    for rec in records:
        w.writerow([rec.model, rec.row, rec.detail])
    return buf.getvalue()


def load_records(text, B=None, beta=None):
    """Parse record CSV; ``delta`` is recomputed when ``B`` and ``beta`` are given."""
    reader = csv.DictReader(io.StringIO(text))
    records = [MmeRecord(r["model"], int(r["row"]), int(r["detail"])) for r in reader]
    if B is not None and beta is not None:
        b = np.asarray(beta, dtype=float)
        diff = apply_records(B, records) @ b - B @ b
        records = [MmeRecord(r.model, r.row, r.detail, float(diff[r.row])) for r in records]
    return records
