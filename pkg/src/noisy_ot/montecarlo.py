"""Replication bookkeeping shared by the error-rate and disappointment estimators.

Replication ``i`` at sample size ``N`` always draws from
``substream(seed, N, i)``.  Work is cut into fixed chunks of replications, so
the chunk boundaries (and hence every number computed) do not depend on how
many worker processes are used.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .channels import sample_noisy_indices
from .measures import substream

CHUNK = 1000


def chunks(n_grid, reps, chunk=CHUNK):
    return [(int(N), lo, min(lo + chunk, reps)) for N in n_grid for lo in range(0, reps, chunk)]


def noisy_counts(p, K, N, seed, lo, hi):
    """Observed counts for replications ``lo..hi-1`` at sample size ``N``."""
    m = K.shape[1]
    out = np.empty((hi - lo, m), dtype=np.int64)
    for k, rep in enumerate(range(lo, hi)):
        idx = sample_noisy_indices(p, K, N, substream(seed, N, rep))
        out[k] = np.bincount(idx, minlength=m)
    return out


def run_tasks(fn, tasks, threads=1):
    """``[fn(*t) for t in tasks]``, optionally on a process pool; order is kept."""
    if threads is None or threads <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, *zip(*tasks)))


def log_binom_pmf(p, n):
    """Log probabilities of ``k = 0..n`` successes; exact zeros at ``p`` in {0, 1}."""
    k = np.arange(n + 1)
    out = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        if p == 0.0:
            return np.where(k == 0, 0.0, -np.inf)
        if p == 1.0:
            return np.where(k == n, 0.0, -np.inf)
        return out + k * math.log(p) + (n - k) * math.log1p(-p)


def exact_binomial_log_tail(p: float, n: int, predicate) -> float:
    """``log sum_{k : predicate(k)} C(n, k) p^k (1-p)^(n-k)``, summed in log space."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    mask = _mask(predicate, n)
    if not mask.any():
        return -math.inf
    return float(logsumexp(log_binom_pmf(p, n)[mask]))


def exact_binomial_tail(p: float, n: int, predicate) -> float:
    """Probability that a Binomial(n, p) count satisfies ``predicate``.

    ``predicate`` is a callable on counts or a boolean mask of length ``n+1``.
    """
    return math.exp(exact_binomial_log_tail(p, n, predicate))


def _mask(predicate, n):
    if callable(predicate):
        return np.array([bool(predicate(k)) for k in range(n + 1)])
    mask = np.asarray(predicate, dtype=bool)
    if mask.shape != (n + 1,):
        raise ValueError(f"mask must have length {n + 1}")
    return mask


@dataclass
class SlopeFit:
    slope: float
    stderr: float
    kind: str  # "fit", "upper_bound" or "undefined"
    upper_bounds: list = field(default_factory=list)


def fit_counts(n_grid, counts, reps) -> SlopeFit:
    """Weighted least squares of ``log(k/reps)`` on ``N``.

    Weights are the inverse delta-method variances ``k / (1 - f)``.  Cells
    with ``k = 0`` are left out; their rule-of-three bounds ``3/reps`` are
    used only when fewer than two cells are nonzero, in which case the
    returned slope is an upper bound.
    """
    N = np.asarray(n_grid, dtype=float)
    k = np.asarray(counts, dtype=float)
    f = k / reps
    bounds = [3.0 / reps if c == 0 else None for c in counts]
    nz = k > 0
    if nz.sum() >= 2:
        w = k[nz] / np.maximum(1.0 - f[nz], 1.0 / reps)
        x, y = N[nz], np.log(f[nz])
        xm = np.sum(w * x) / w.sum()
        ym = np.sum(w * y) / w.sum()
        sxx = np.sum(w * (x - xm) ** 2)
        slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
        return SlopeFit(slope, float(math.sqrt(1.0 / sxx)), "fit", bounds)
    log3 = math.log(3.0 / reps)
    if nz.sum() == 1:
        i = int(np.flatnonzero(nz)[0])
        later = [j for j in range(len(counts)) if counts[j] == 0 and N[j] > N[i]]
        if not later:
            return SlopeFit(math.nan, math.nan, "undefined", bounds)
        slope = min((log3 - math.log(f[i])) / (N[j] - N[i]) for j in later)
        return SlopeFit(float(slope), math.nan, "upper_bound", bounds)
    # P(error at N) <= 3/reps with P <= 1 at N = 0
    return SlopeFit(log3 / float(N.max()), math.nan, "upper_bound", bounds)


def fit_exact(n_grid, log_probs) -> SlopeFit:
    """Ordinary least squares of exact log-probabilities on ``N``."""
    N = np.asarray(n_grid, dtype=float)
    y = np.asarray(log_probs, dtype=float)
    ok = np.isfinite(y)
    if ok.sum() < 2:
        return SlopeFit(math.nan, math.nan, "undefined")
    x, y = N[ok], y[ok]
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    if x.size > 2:
        resid = y - ym - slope * (x - xm)
        stderr = float(math.sqrt(np.sum(resid**2) / (x.size - 2) / sxx))
    else:
        stderr = 0.0
    return SlopeFit(slope, stderr, "fit")
