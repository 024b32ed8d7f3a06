"""Smoothed-rate hypothesis tests and their exponential error rates.

The test ``h^delta`` accepts the null ``P0`` when the smoothed rate of the
noisy empirical measure is at most the radius ``r``; its type I error decays
at least like ``exp(-r N)``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .channels import Channel, convolve
from .errors import DimensionError, DomainError
from .measures import ProbMeasure, check_seed
from .montecarlo import (chunks, exact_binomial_log_tail, exact_binomial_tail, fit_counts, fit_exact, noisy_counts,
                         run_tasks)
from .rate import smoothed_rate

__all__ = [
    "TestDecision", "TestSpec", "ErrorRateReport", "h_delta_test", "type1_rate", "type2_rate",
    "exact_binomial_tail", "exact_binomial_log_tail",
]

TIE_TOL = 1e-9


class TestDecision(str, enum.Enum):
    ACCEPT_NULL = "accept_null"
    REJECT_NULL = "reject_null"

    __test__ = False


@dataclass(frozen=True, eq=False)
class TestSpec:
    null_measure: ProbMeasure
    channel: Channel
    radius: float
    delta: float
    alt_measure: ProbMeasure | None = None

    __test__ = False

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("radius must be positive")
        if not self.delta >= 0:
            raise DomainError("delta must be nonnegative")
        for m in (self.null_measure, self.alt_measure):
            if m is not None and m.size != self.channel.n_latent:
                raise DimensionError(f"measure of size {m.size} does not fit a channel with "
                                     f"{self.channel.n_latent} latent points")


@dataclass
class ErrorRateReport:
    n_grid: list
    log_prob: list
    slope: float
    slope_stderr: float
    method: str
    errors: list | None = None
    reps: int | None = None
    sentinel: list = field(default_factory=list)
    slope_kind: str = "fit"
    kind: str = "type1"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "errors", "reps", "log_freq", "sentinel_flag"])
        for i, N in enumerate(self.n_grid):
            errs = "" if self.errors is None else self.errors[i]
            reps = "" if self.reps is None else self.reps
            w.writerow([N, errs, reps, _fmt(self.log_prob[i]), int(bool(self.sentinel[i])) if self.sentinel else 0])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "method": self.method,
            "n_grid": list(self.n_grid),
            "errors": self.errors,
            "reps": self.reps,
            "log_prob": [_jsonable(v) for v in self.log_prob],
            "sentinel": list(self.sentinel),
            "slope": _jsonable(self.slope),
            "slope_stderr": _jsonable(self.slope_stderr),
            "slope_kind": self.slope_kind,
        }


def _fmt(v):
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def _jsonable(v):
    v = float(v)
    return v if math.isfinite(v) else _fmt(v)


def _accept(value, r, tie):
    return value <= r + tie


def h_delta_test(p_emp: ProbMeasure, spec: TestSpec, method: str = "exact") -> TestDecision:
    """Accept ``P0`` iff ``I^delta(P'_N, P0) <= r``; ties within solver tolerance accept.

    ``method`` selects the smoothed-rate solver (``"exact"`` or
    ``"frank_wolfe"``); with Frank-Wolfe the final duality gap widens the tie band.
    """
    ev = smoothed_rate(p_emp, spec.null_measure, spec.channel, spec.delta, method=method)
    tie = max(TIE_TOL, ev.gap if math.isfinite(ev.gap) else 0.0)
    return TestDecision.ACCEPT_NULL if _accept(ev.value, spec.radius, tie) else TestDecision.REJECT_NULL


class _Tester:
    """Vectorized ``h^delta`` on count vectors with a per-call cache."""

    def __init__(self, spec: TestSpec):
        self.q = np.ascontiguousarray(spec.null_measure.weights @ spec.channel.kernel)
        self.r = spec.radius
        self.delta = spec.delta
        self.x = np.empty(self.q.size)
        self.cache = {}

    def rejects(self, counts) -> bool:
        key = counts.tobytes()
        hit = self.cache.get(key)
        if hit is None:
            phat = counts / counts.sum()
            status, a, b = _kernels.smooth_project(phat, self.q, self.delta, self.x)
            if status == _kernels.PROJ_INFEASIBLE:
                value = math.inf
            elif status == _kernels.PROJ_INSIDE:
                value = 0.0
            else:
                value = _kernels.kl_row(self.x, self.q)
            hit = not _accept(value, self.r, TIE_TOL)
            self.cache[key] = hit
        return hit


def _mc_chunk(spec, source, count_errors_on_reject, N, seed, lo, hi):
    counts = noisy_counts(source, spec.channel.kernel, N, seed, lo, hi)
    t = _Tester(spec)
    return sum(1 for c in counts if t.rejects(c) == count_errors_on_reject)


def _error_rate(spec, source, on_reject, n_grid, reps, seed, method, threads, kind):
    n_grid = [int(N) for N in n_grid]
    if not n_grid:
        raise DomainError("n_grid must be nonempty")
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])) or n_grid[0] < 1:
        raise DomainError("n_grid must be strictly increasing positive integers")
    if method == "auto":
        method = "exact_binomial" if spec.channel.n_obs == 2 else "monte_carlo"
    if method == "exact_binomial":
        if spec.channel.n_obs != 2:
            raise DimensionError("exact enumeration needs a binary observation alphabet")
        q1 = float(np.clip(source @ spec.channel.kernel, 0.0, 1.0)[1])
        t = _Tester(spec)
        logs = []
        for N in n_grid:
            mask = np.array([t.rejects(np.array([N - k, k])) == on_reject for k in range(N + 1)])
            logs.append(exact_binomial_log_tail(q1, N, mask))
        fit = fit_exact(n_grid, logs)
        return ErrorRateReport(n_grid, logs, fit.slope, fit.stderr, "exact_binomial", slope_kind=fit.kind, kind=kind,
                               sentinel=[not math.isfinite(v) for v in logs])
    if method != "monte_carlo":
        raise DomainError(f"unknown method {method!r}")
    if reps < 1:
        raise DomainError("reps must be at least 1")
    seed = check_seed(seed)
    tasks = [(spec, source, on_reject, N, seed, lo, hi) for N, lo, hi in chunks(n_grid, reps)]
    parts = run_tasks(_mc_chunk, tasks, threads)
    errors = [0] * len(n_grid)
    for (N, _, _), k in zip(chunks(n_grid, reps), parts):
        errors[n_grid.index(N)] += k
    logs = [math.log(k / reps) if k > 0 else -math.inf for k in errors]
    fit = fit_counts(n_grid, errors, reps)
    return ErrorRateReport(n_grid, logs, fit.slope, fit.stderr, "monte_carlo", errors, reps,
                           [k == 0 for k in errors], fit.kind, kind)


def type1_rate(spec: TestSpec, n_grid, reps: int, seed: int, method: str = "auto", threads: int = 1) -> ErrorRateReport:
    """Rejection frequency under data drawn from ``P0`` and its exponential slope.

    Parameters
    ----------
    method : {"auto", "monte_carlo", "exact_binomial"}
        ``"auto"`` enumerates counts exactly on binary observation alphabets.
    threads : int
        Worker processes for Monte Carlo chunks; results do not depend on it.
    """
    return _error_rate(spec, spec.null_measure.weights, True, n_grid, reps, seed, method, threads, "type1")


def type2_rate(spec: TestSpec, n_grid, reps: int, seed: int, method: str = "auto", threads: int = 1) -> ErrorRateReport:
    """Acceptance frequency under data drawn from ``P1``."""
    if spec.alt_measure is None:
        raise DomainError("type II rates need an alternative measure")
    return _error_rate(spec, spec.alt_measure.weights, False, n_grid, reps, seed, method, threads, "type2")


def acceptance_region_rate(spec: TestSpec) -> float:
    """``min KL(q, O*P1)`` over binary observed laws ``q`` that the test accepts.

    The smoothed rate is convex in ``q``, so the acceptance region is an
    interval around ``O*P0``; its end points are found by bisection and the
    divergence, convex with minimum at ``O*P1``, is minimized by clipping.
    """
    if spec.channel.n_obs != 2 or spec.alt_measure is None:
        raise DimensionError("needs a binary observation alphabet and an alternative")
    q0 = np.ascontiguousarray(convolve(spec.channel, spec.null_measure).weights)
    q1 = convolve(spec.channel, spec.alt_measure).weights
    x = np.empty(2)

    def accepted(s):
        status, a, b = _kernels.smooth_project(np.array([1.0 - s, s]), q0, spec.delta, x)
        if status == _kernels.PROJ_INSIDE:
            return True
        if status == _kernels.PROJ_INFEASIBLE:
            return False
        return _accept(_kernels.kl_row(x, q0), spec.radius, TIE_TOL)

    def edge(inside, outside):
        if accepted(outside):
            return outside
        for _ in range(200):
            mid = 0.5 * (inside + outside)
            if accepted(mid):
                inside = mid
            else:
                outside = mid
        return inside

    lo, hi = edge(q0[1], 0.0), edge(q0[1], 1.0)
    s = min(max(q1[1], lo), hi)
    return _kernels.kl_row(np.array([1.0 - s, s]), q1)
