"""Data-driven predictors and prescriptors for finite decision lists.

A predictor maps observed data to a budget ``c(z)`` for each decision ``z``;
the prescriptor picks the lowest-index decision whose budget is within
``epsilon`` of the smallest one.  Formulations:

- ``SAA_plugin``: plug the noisy empirical measure in as if it were the latent law.
- ``MLE_plugin``: plug in the EM deconvolution estimate.
- ``EntropicDRO``: worst case over ``{P : KL(P'_N, P) <= r}``, ignoring noise.
- ``OTDRO``: worst case over ``{P : I^delta(P'_N, P) <= r}``.

A budget is disappointing when the true expected cost of the chosen decision
exceeds it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .channels import Channel
from .errors import DimensionError, DomainError, InfeasibleFormulationError
from .measures import ProbMeasure, as_weights, check_seed
from .montecarlo import chunks, fit_counts, fit_exact, log_binom_pmf, noisy_counts, run_tasks
from .rate import smoothed_rate

FORMULATIONS = ("SAA_plugin", "MLE_plugin", "EntropicDRO", "OTDRO")
RESERVED_FORMULATIONS = ("KernelDeconvolution",)

DRO_TOL = 1e-9
BARRIER_MU = 20.0
PHASE_ONE_ITERS = 20_000
EM_TOL = 1e-10
EM_MAX_ITER = 10_000


@dataclass(frozen=True, eq=False)
class DecisionProblem:
    loss: np.ndarray
    epsilon: float
    decision_labels: tuple = ()

    def __init__(self, loss, epsilon: float, decision_labels=None):
        L = np.array(loss, dtype=float)
        if L.ndim != 2 or L.size == 0:
            raise DimensionError("loss must be a nonempty |Z| x n matrix")
        if not np.all(np.isfinite(L)):
            raise DomainError("loss must be finite")
        if not epsilon > 0:
            raise DomainError("epsilon must be positive")
        labels = tuple(range(L.shape[0])) if decision_labels is None else tuple(decision_labels)
        if len(labels) != L.shape[0]:
            raise DimensionError("one label per decision")
        L.setflags(write=False)
        object.__setattr__(self, "loss", L)
        object.__setattr__(self, "epsilon", float(epsilon))
        object.__setattr__(self, "decision_labels", labels)

    @property
    def n_decisions(self) -> int:
        return int(self.loss.shape[0])


@dataclass(frozen=True)
class FullSimplex:
    pass


@dataclass(frozen=True)
class ExplicitList:
    measures: tuple


@dataclass(frozen=True, eq=False)
class AmbiguitySpec:
    radius: float
    delta: float
    channel: Channel
    prior_family: FullSimplex | ExplicitList = field(default_factory=FullSimplex)

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("radius must be positive")
        if not self.delta >= 0:
            raise DomainError("delta must be nonnegative")
        if isinstance(self.prior_family, ExplicitList):
            for m in self.prior_family.measures:
                if m.size != self.channel.n_latent:
                    raise DimensionError("prior list measures must match the channel's latent alphabet")


@dataclass
class Prescription:
    decision_index: int
    budget: float
    per_decision_values: list
    worst_case_witness: ProbMeasure | None = None
    solved: list | None = None

    def to_json(self) -> dict:
        return {
            "decision_index": self.decision_index,
            "budget": _num(self.budget),
            "per_decision_values": [_num(v) for v in self.per_decision_values],
            "worst_case_witness": self.worst_case_witness.to_json() if self.worst_case_witness is not None else None,
        }


def _num(v):
    v = float(v)
    if math.isfinite(v):
        return v
    return "-inf" if v < 0 else ("inf" if v > 0 else "nan")


def _check_z(z, prob):
    if not 0 <= z < prob.n_decisions:
        raise IndexError(f"decision index {z} out of range for {prob.n_decisions} decisions")


def expected_cost(z: int, p, prob: DecisionProblem) -> float:
    _check_z(z, prob)
    w = as_weights(p)
    if w.size != prob.loss.shape[1]:
        raise DimensionError("measure and loss sizes disagree")
    return float(prob.loss[z] @ w)


def select(values, epsilon) -> int:
    """Lowest index whose value is within ``epsilon`` of the minimum."""
    v = np.asarray(values, dtype=float)
    best = v.min()
    return int(np.flatnonzero(v <= best + epsilon)[0])


def solve_saa(p_est, prob: DecisionProblem) -> Prescription:
    w = as_weights(p_est)
    if w.size != prob.loss.shape[1]:
        raise DimensionError("measure and loss sizes disagree")
    values = prob.loss @ w
    z = select(values, prob.epsilon)
    witness = p_est if isinstance(p_est, ProbMeasure) else ProbMeasure(w)
    return Prescription(z, float(values[z]), [float(v) for v in values], witness)


@dataclass
class EMResult:
    measure: ProbMeasure
    log_likelihood: list
    iterations: int
    converged: bool


def mle_em(p_obs_emp, ch: Channel, tol: float = EM_TOL, max_iter: int = EM_MAX_ITER, trace: bool = False) -> EMResult:
    """Maximum-likelihood deconvolution ``max_P sum_j P'_j log (O*P)_j`` by EM.

    Starts from the uniform law and applies ``P_i <- P_i sum_j P'_j K_ij / (O*P)_j``
    until the log-likelihood gain drops below ``tol``.  With ``trace`` the
    full log-likelihood sequence is returned, otherwise its last value.
    """
    po = as_weights(p_obs_emp)
    if po.size != ch.n_obs:
        raise DimensionError("observation size does not match the channel")
    K = np.ascontiguousarray(ch.kernel)
    if np.any(K[:, po > 0].sum(axis=0) <= 0):
        raise DomainError("observed a symbol that no latent point can emit")
    P = np.empty(ch.n_latent)
    buf = np.empty(max_iter + 1 if trace else 0)
    it, ok = _kernels.em_deconvolve(np.ascontiguousarray(po), K, tol, max_iter, P, buf)
    if trace:
        ll = [float(v) for v in buf[: it + 1]]
    else:
        q = P @ K
        ll = [float(np.sum(po[po > 0] * np.log(q[po > 0])))]
    return EMResult(ProbMeasure(P), ll, int(it), bool(ok))


def entropic_dro_predictor(z: int, p_emp, r: float, prob: DecisionProblem, witness: bool = False):
    """``sup {E_P loss(z) : KL(P_N, P) <= r}`` over the simplex.

    Solved through the one-dimensional dual
    ``min_{eta >= max loss} eta - exp(-r) prod_i (eta - loss_i)^{P_N,i}``
    by bisection.  Returns the value, or ``(value, witness)``.
    """
    _check_z(z, prob)
    if not r > 0:
        raise DomainError("r must be positive")
    a = as_weights(p_emp)
    if a.size != prob.loss.shape[1]:
        raise DimensionError("measure and loss sizes disagree")
    P = np.empty(a.size)
    v = float(_kernels.kl_dro_value(np.ascontiguousarray(prob.loss[z]), np.ascontiguousarray(a), float(r), P))
    return (v, ProbMeasure(P)) if witness else v


def _phase_one(K, phat, r, delta):
    P0 = np.empty(K.shape[0])
    status = _kernels.phase_one(K, phat, r, delta, PHASE_ONE_ITERS, P0)
    return status, P0


def _list_worst_case(z, phat, spec, prob):
    best, arg = -math.inf, None
    for m in spec.prior_family.measures:
        ev = smoothed_rate(ProbMeasure(phat), m, spec.channel, spec.delta, method="exact")
        if ev.value <= spec.radius:
            v = float(prob.loss[z] @ m.weights)
            if v > best:
                best, arg = v, m
    return best, arg


def ot_dro_worst_case(z: int, p_obs_emp, spec: AmbiguitySpec, prob: DecisionProblem, tol: float = DRO_TOL):
    """Worst-case expected loss of ``z`` over ``{P in family : I^delta(P'_N, P) <= r}`` and its witness.

    For the full simplex the problem is solved on ``P`` alone with the exact
    smoothed rate: a majorize-minimize pass finds a strictly feasible point
    (or certifies the set is empty), then a log-barrier Newton method follows
    the central path until the duality-gap bound is below ``tol`` times the
    loss range.  The returned witness is feasible, so the value is a lower
    bound accurate to that gap.

    Raises
    ------
    InfeasibleFormulationError
        If the ambiguity set is empty.
    """
    _check_z(z, prob)
    phat = np.ascontiguousarray(as_weights(p_obs_emp), dtype=float)
    K = np.ascontiguousarray(spec.channel.kernel)
    if phat.size != spec.channel.n_obs or prob.loss.shape[1] != spec.channel.n_latent:
        raise DimensionError("observation, channel and loss sizes disagree")
    if isinstance(spec.prior_family, ExplicitList):
        v, m = _list_worst_case(z, phat, spec, prob)
        if m is None:
            raise InfeasibleFormulationError("no listed prior lies within the smoothed-rate radius")
        return v, m
    status, P0 = _phase_one(K, phat, spec.radius, spec.delta)
    if status == _kernels.ROW_EMPTY:
        raise InfeasibleFormulationError("the smoothed-rate ambiguity set is empty")
    P = np.empty(P0.size)
    v = _kernels.dro_value(np.ascontiguousarray(prob.loss[z]), K, phat, spec.radius, spec.delta, P0, tol,
                           BARRIER_MU, P)
    return float(v), ProbMeasure(np.clip(P, 0.0, None))


def ot_dro_predictor(z: int, p_obs_emp, spec: AmbiguitySpec, prob: DecisionProblem, tol: float = DRO_TOL) -> float:
    """``sup {E_P loss(z) : P in family, I^delta(P'_N, P) <= r}``; see ``ot_dro_worst_case``."""
    return ot_dro_worst_case(z, p_obs_emp, spec, prob, tol)[0]


def ot_dro_prescribe(p_obs_emp, spec: AmbiguitySpec, prob: DecisionProblem, tol: float = DRO_TOL,
                     prune: bool = False) -> Prescription:
    """Evaluate the OT-DRO predictor for every decision and apply the epsilon rule.

    With ``prune`` set, decisions whose cost under an already computed
    worst-case witness exceeds the best budget by more than ``epsilon`` are
    skipped; the chosen decision and budget are unchanged, and
    ``per_decision_values`` then holds lower bounds for the skipped entries
    (flagged in ``solved``).
    """
    phat = np.ascontiguousarray(as_weights(p_obs_emp), dtype=float)
    K = np.ascontiguousarray(spec.channel.kernel)
    if phat.size != spec.channel.n_obs or prob.loss.shape[1] != spec.channel.n_latent:
        raise DimensionError("observation, channel and loss sizes disagree")
    if isinstance(spec.prior_family, ExplicitList):
        vals, wits = [], []
        for z in range(prob.n_decisions):
            v, m = _list_worst_case(z, phat, spec, prob)
            vals.append(v)
            wits.append(m)
        if wits[0] is None:
            raise InfeasibleFormulationError("no listed prior lies within the smoothed-rate radius")
        z = select(vals, prob.epsilon)
        return Prescription(z, vals[z], vals, wits[z], [True] * len(vals))
    C = np.ascontiguousarray(prob.loss)
    values = np.empty(prob.n_decisions)
    solved = np.zeros(prob.n_decisions, dtype=np.bool_)
    W = np.zeros((prob.n_decisions, K.shape[0]))
    status, z, budget = _kernels.dro_prescribe_row(C, K, phat, spec.radius, spec.delta, prob.epsilon, tol,
                                                   BARRIER_MU, prune, values, solved, W)
    if status == _kernels.ROW_EMPTY:
        raise InfeasibleFormulationError("the smoothed-rate ambiguity set is empty")
    witness = ProbMeasure(np.clip(W[z], 0.0, None) / np.clip(W[z], 0.0, None).sum())
    return Prescription(int(z), float(budget), [float(v) for v in values], witness, [bool(s) for s in solved])


def joint_lagrangian(P, P2, lam: float, c, K):
    """``c.P - lam KL(P'', K^T P)`` and its gradients in ``P`` and ``P''``.

    This is the Lagrangian of the joint formulation
    ``max {c.P : KL(P'', O*P) <= r, tv(P'', P'_N) <= delta}`` with the KL
    constraint dualized.
    """
    P, P2, c, K = (np.asarray(v, dtype=float) for v in (P, P2, c, K))
    q = P @ K
    pos = P2 > 0
    val = float(c @ P - lam * np.sum(P2[pos] * np.log(P2[pos] / q[pos])))
    w = np.where(q > 0, P2 / np.where(q > 0, q, 1.0), 0.0)
    grad_P = c + lam * (K @ w)
    grad_P2 = np.where(pos, -lam * (np.log(np.where(pos, P2, 1.0) / q) + 1.0), np.inf)
    return val, grad_P, grad_P2


def barrier_objective(P, t: float, c, K, phat, r: float, delta: float):
    """``-t c.P - log(r - I^delta(P'_N, P)) - sum log P`` and its gradient in ``P``.

    This is the function minimized along the central path by the OT-DRO solver.
    """
    P = np.ascontiguousarray(P, dtype=float)
    K = np.ascontiguousarray(K, dtype=float)
    c = np.asarray(c, dtype=float)
    q = np.empty(K.shape[1])
    x = np.empty(K.shape[1])
    phi, status, a, b = _kernels.smoothed_value(P, K, np.ascontiguousarray(phat, dtype=float), delta, q, x)
    g = np.empty(P.size)
    _kernels.smoothed_grad(K, q, x, g)
    s = r - phi
    val = float(-t * c @ P - math.log(s) - np.sum(np.log(P)))
    grad = -t * c + g / s - 1.0 / P
    return val, grad


# Monte Carlo disappointment

@dataclass
class DisappointmentReport:
    formulation: str
    n_grid: list
    disappointments: list | None
    reps: int | None
    log_prob: list
    budget_mean: list
    slope: float
    slope_stderr: float
    slope_kind: str
    method: str
    target_rate: float
    empty_sets: list | None = None
    sentinel: list = field(default_factory=list)

    def rows(self):
        for i, N in enumerate(self.n_grid):
            yield [self.formulation, N,
                   "" if self.disappointments is None else self.disappointments[i],
                   "" if self.reps is None else self.reps,
                   _csv_num(self.log_prob[i]), _csv_num(self.budget_mean[i])]

    def to_json(self) -> dict:
        return {
            "formulation": self.formulation,
            "method": self.method,
            "n_grid": list(self.n_grid),
            "disappointments": self.disappointments,
            "reps": self.reps,
            "log_prob": [_num(v) for v in self.log_prob],
            "budget_mean": [_num(v) for v in self.budget_mean],
            "empty_sets": self.empty_sets,
            "slope": _num(self.slope),
            "slope_stderr": _num(self.slope_stderr),
            "slope_kind": self.slope_kind,
            "target_rate": self.target_rate,
        }


DISAPPOINT_HEADER = ["formulation", "N", "disappointments", "reps", "log_freq", "budget_mean"]


def _csv_num(v):
    v = float(v)
    if math.isfinite(v):
        return repr(v)
    return "-inf" if v < 0 else ("inf" if v > 0 else "nan")


def disappointment_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DISAPPOINT_HEADER)
    for rep in reports:
        for row in rep.rows():
            w.writerow(row)
    return buf.getvalue()


class Prescriber:
    """Batch evaluation of one formulation on count vectors, with a cache.

    ``__call__`` returns ``(decision, budget)``; an empty OT-DRO ambiguity set
    yields budget ``-inf``, which any realized cost disappoints.
    """

    def __init__(self, formulation, prob: DecisionProblem, channel: Channel, r: float, delta: float = 0.0,
                 tol: float = DRO_TOL):
        if formulation in RESERVED_FORMULATIONS:
            raise NotImplementedError(f"formulation {formulation!r} is reserved and not implemented")
        if formulation not in FORMULATIONS:
            raise DomainError(f"unknown formulation {formulation!r}")
        n, m = channel.n_latent, channel.n_obs
        if prob.loss.shape[1] != n:
            raise DimensionError("loss columns must match the latent alphabet")
        if formulation in ("SAA_plugin", "EntropicDRO") and n != m:
            raise DimensionError(f"{formulation} plugs observed data in directly and needs equal alphabets")
        self.formulation = formulation
        self.C = np.ascontiguousarray(prob.loss)
        self.K = np.ascontiguousarray(channel.kernel)
        self.eps = prob.epsilon
        self.r = float(r)
        self.delta = float(delta)
        self.tol = tol
        self.cache = {}
        nz = self.C.shape[0]
        self._vals = np.empty(nz)
        self._solved = np.zeros(nz, dtype=np.bool_)
        self._W = np.zeros((nz, n))
        self._P = np.empty(n)
        self._trace = np.empty(0)

    def __call__(self, counts):
        key = counts.tobytes()
        hit = self.cache.get(key)
        if hit is None:
            hit = self._solve(counts / counts.sum())
            self.cache[key] = hit
        return hit

    def _plugin(self, p):
        values = self.C @ p
        z = select(values, self.eps)
        return z, float(values[z])

    def _solve(self, phat):
        f = self.formulation
        if f == "SAA_plugin":
            return self._plugin(phat)
        if f == "MLE_plugin":
            _kernels.em_deconvolve(phat, self.K, EM_TOL, EM_MAX_ITER, self._P, self._trace)
            return self._plugin(self._P)
        if f == "EntropicDRO":
            vals = np.array([_kernels.kl_dro_value(self.C[z], phat, self.r, self._P) for z in range(self.C.shape[0])])
            z = select(vals, self.eps)
            return z, float(vals[z])
        status, z, budget = _kernels.dro_prescribe_row(self.C, self.K, phat, self.r, self.delta, self.eps, self.tol,
                                                       BARRIER_MU, True, self._vals, self._solved, self._W)
        if status == _kernels.ROW_EMPTY:
            return 0, -math.inf
        return int(z), float(budget)


def _disappoint_chunk(prescribers, true_costs, p_true, K, N, seed, lo, hi):
    counts = noisy_counts(p_true, K, N, seed, lo, hi)
    out = []
    for pr in prescribers:
        budgets = np.empty(hi - lo)
        flags = np.empty(hi - lo, dtype=bool)
        for k, c in enumerate(counts):
            z, b = pr(c)
            budgets[k] = b
            flags[k] = true_costs[z] > b
        out.append((flags, budgets))
    return out


def _summaries(budgets, flags):
    fin = np.isfinite(budgets)
    mean = float(np.mean(budgets[fin])) if fin.any() else -math.inf
    return int(flags.sum()), mean, int((~fin).sum())


def disappointment_runs(prescribers, p_true: ProbMeasure, channel: Channel, n_grid, reps: int, seed: int,
                        threads: int = 1):
    """Per-formulation ``(flags, budgets)`` arrays per N, sharing random numbers across formulations."""
    seed = check_seed(seed)
    if reps < 1:
        raise DomainError("reps must be at least 1")
    true_costs = prescribers[0].C @ p_true.weights
    tasks = [(prescribers, true_costs, p_true.weights, channel.kernel, N, seed, lo, hi)
             for N, lo, hi in chunks(n_grid, reps)]
    parts = run_tasks(_disappoint_chunk, tasks, threads)
    out = [{N: ([], []) for N in n_grid} for _ in prescribers]
    for (N, _, _), res in zip(chunks(n_grid, reps), parts):
        for k, (flags, budgets) in enumerate(res):
            out[k][N][0].append(flags)
            out[k][N][1].append(budgets)
    return [{N: (np.concatenate(f), np.concatenate(b)) for N, (f, b) in d.items()} for d in out]


def _exact_disappointment(pr, p_true, channel, n_grid):
    true_costs = pr.C @ p_true.weights
    q1 = float(np.clip(p_true.weights @ channel.kernel, 0.0, 1.0)[1])
    logs, means, empties = [], [], []
    for N in n_grid:
        lp = log_binom_pmf(q1, N)
        hit = np.zeros(N + 1, dtype=bool)
        budgets = np.empty(N + 1)
        for k in range(N + 1):
            z, b = pr(np.array([N - k, k]))
            budgets[k] = b
            hit[k] = true_costs[z] > b
        logs.append(float(np.logaddexp.reduce(lp[hit])) if hit.any() else -math.inf)
        fin = np.isfinite(budgets) & np.isfinite(lp)
        w = np.exp(lp[fin])
        means.append(float(np.sum(w * budgets[fin]) / w.sum()) if w.sum() > 0 else -math.inf)
        empties.append(float(np.exp(lp[~np.isfinite(budgets)]).sum()))
    return logs, means, empties


def disappointment_rate(formulation: str, p_true: ProbMeasure, spec: AmbiguitySpec, prob: DecisionProblem, n_grid,
                        reps: int, seed: int, method: str = "auto", threads: int = 1) -> DisappointmentReport:
    """Frequency with which the formulation's budget underestimates the true cost.

    Parameters
    ----------
    formulation : {"SAA_plugin", "MLE_plugin", "EntropicDRO", "OTDRO"}
    method : {"auto", "monte_carlo", "exact_binomial"}
        ``"auto"`` enumerates counts exactly on binary observation alphabets.
    threads : int
        Worker processes; the report does not depend on it.

    Returns
    -------
    DisappointmentReport
        ``target_rate`` is ``-r``; ``budget_mean`` averages finite budgets.
    """
    n_grid = [int(N) for N in n_grid]
    if not n_grid or any(b <= a for a, b in zip(n_grid, n_grid[1:])) or n_grid[0] < 1:
        raise DomainError("n_grid must be strictly increasing positive integers")
    if p_true.size != spec.channel.n_latent:
        raise DimensionError("true measure does not match the channel")
    if isinstance(spec.prior_family, ExplicitList):
        raise DomainError("disappointment estimation supports the full-simplex family only")
    pr = Prescriber(formulation, prob, spec.channel, spec.radius, spec.delta)
    if method == "auto":
        method = "exact_binomial" if spec.channel.n_obs == 2 else "monte_carlo"
    if method == "exact_binomial":
        if spec.channel.n_obs != 2:
            raise DimensionError("exact enumeration needs a binary observation alphabet")
        logs, means, empties = _exact_disappointment(pr, p_true, spec.channel, n_grid)
        fit = fit_exact(n_grid, logs)
        return DisappointmentReport(formulation, n_grid, None, None, logs, means, fit.slope, fit.stderr, fit.kind,
                                    "exact_binomial", -spec.radius, None, [not math.isfinite(v) for v in logs])
    runs = disappointment_runs([pr], p_true, spec.channel, n_grid, reps, seed, threads)[0]
    return report_from_runs(formulation, runs, n_grid, reps, spec.radius)


def report_from_runs(label, runs, n_grid, reps, r) -> DisappointmentReport:
    counts, means, empties = [], [], []
    for N in n_grid:
        flags, budgets = runs[N]
        k, mean, e = _summaries(budgets, flags)
        counts.append(k)
        means.append(mean)
        empties.append(e)
    logs = [math.log(k / reps) if k > 0 else -math.inf for k in counts]
    fit = fit_counts(n_grid, counts, reps)
    return DisappointmentReport(label, n_grid, counts, reps, logs, means, fit.slope, fit.stderr, fit.kind,
                                "monte_carlo", -r, empties, [k == 0 for k in counts])
