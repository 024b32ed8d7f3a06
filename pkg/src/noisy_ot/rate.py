"""Rate function of the noisy empirical measure and its delta-smoothed version.

For a latent law ``P`` observed through channel ``O`` the rate at an
observed law ``P'`` is

    I(P', P) = inf_Q  D_W(Q, P') + KL(Q, P) + KL(P', m')

which contracts to ``KL(P', O*P)``.  The smoothed rate ``I^delta(P', P)`` is
the smallest ``I(P'', P)`` over ``P''`` within total variation ``delta`` of
``P'``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .channels import Channel
from .errors import DimensionError, DomainError, NoFeasiblePlanError
from .measures import ProbMeasure, as_weights, kl_divergence, tv_distance
from .transport import TransportPlan, eot_distance

VARIATIONAL_TOL = 1e-8
SMOOTHED_TOL = 1e-7
MAX_ITER = 10_000
LOG_FLOOR = -600.0
MIN_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class RateEvaluation:
    value: float
    witness_q: ProbMeasure | None
    witness_plan: TransportPlan | None
    method: str
    terms: dict | None = None
    iterations: int = 0
    converged: bool = True

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "method": self.method,
            "witness_q": self.witness_q.to_json() if self.witness_q is not None else None,
            "witness_plan": self.witness_plan.matrix.tolist() if self.witness_plan is not None else None,
            "terms": self.terms,
            "iterations": self.iterations,
            "converged": self.converged,
        }


@dataclass(frozen=True, eq=False)
class SmoothedRateEvaluation:
    value: float
    witness_p2: ProbMeasure | None
    delta: float
    gap: float = 0.0
    iterations: int = 0
    converged: bool = True
    method: str = "frank_wolfe"

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "delta": self.delta,
            "witness_p2": self.witness_p2.to_json() if self.witness_p2 is not None else None,
            "gap": self.gap,
            "iterations": self.iterations,
            "converged": self.converged,
            "method": self.method,
        }


def _check(p_obs, p, ch):
    po, pw = as_weights(p_obs), as_weights(p)
    if pw.size != ch.n_latent or po.size != ch.n_obs:
        raise DimensionError(
            f"channel is {ch.n_latent}x{ch.n_obs}, got prior of size {pw.size} and observation of size {po.size}")
    return po, pw


def witness_plan_matrix(po, pw, K):
    """``T'_ij = P'_j T(P)_ij / (O*P)_j``; columns with ``P'_j = 0`` are zero."""
    T = pw[:, None] * K
    col = T.sum(axis=0)
    scale = np.divide(po, col, out=np.zeros_like(po), where=col > 0)
    return T * scale[None, :]


def rate_closed_form(p_obs: ProbMeasure, p: ProbMeasure, ch: Channel) -> RateEvaluation:
    """``I(P', P) = KL(P', O*P)`` with its minimizing plan and latent marginal."""
    po, pw = _check(p_obs, p, ch)
    q = pw @ ch.kernel
    value = kl_divergence(po, q)
    if math.isinf(value):
        return RateEvaluation(math.inf, None, None, "closed_form")
    T = witness_plan_matrix(po, pw, ch.kernel)
    Q = ProbMeasure(T.sum(axis=1))
    plan = TransportPlan(T, Q, ProbMeasure(po))
    return RateEvaluation(max(value, 0.0), Q, plan, "closed_form")


def rate_variational(p_obs: ProbMeasure, p: ProbMeasure, ch: Channel, tol: float = VARIATIONAL_TOL,
                     max_iter: int = MAX_ITER) -> RateEvaluation:
    """Evaluate ``inf_Q D_W(Q, P') + KL(Q, P) + KL(P', m')`` directly.

    The three terms are first evaluated at the contraction witness ``Q*``.
    Independently, ``Q`` is refined from ``P`` by block-coordinate descent:
    the transport step is Sinkhorn for marginals ``(Q, P')`` and the ``Q``
    step moves toward the closed form ``Q ~ P exp(-f)``, with ``f`` the row
    potential, by a geometric mixture whose weight is halved until the
    objective decreases.
    The returned value is the smaller of the two evaluations.

    ``terms`` holds both evaluations, each split into its three parts.
    """
    po, pw = _check(p_obs, p, ch)
    closed = rate_closed_form(p_obs, p, ch)
    if math.isinf(closed.value):
        return RateEvaluation(math.inf, None, None, "variational")
    sink_tol = min(tol, 1e-10)
    kl_base = kl_divergence(po, ch.base)

    def evaluate(Q, g0=None):
        try:
            rep = eot_distance(Q, po, ch.cost, tol=sink_tol, max_iter=max_iter, init_col_potential=g0)
        except NoFeasiblePlanError:
            return None, math.inf
        return rep, rep.value + kl_divergence(Q, pw)

    q_star = closed.witness_q
    rep_star, f_star = evaluate(q_star.weights)
    at_witness = {"transport": rep_star.value, "kl_latent": kl_divergence(q_star, pw), "kl_base": kl_base,
                  "total": f_star + kl_base}

    # Q lives on latent points that can emit something in the support of P'
    support = (pw > 0) & (ch.kernel[:, po > 0] > 0).any(axis=1)
    Q = np.where(support, pw, 0.0)
    Q /= Q.sum()
    rep, F = evaluate(Q)
    for w in (0.5, 0.9, 0.99, 1.0):
        if rep is not None:
            break
        # P itself admits no coupling with P'; move toward the witness, which does
        Q = (1.0 - w) * Q + w * q_star.weights
        rep, F = evaluate(Q)
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        # mirror step Q ~ Q^(1-eta) (P exp(-f))^eta, halving eta until F decreases
        target = np.log(pw[support]) - rep.row_potential[support]
        eta = 1.0
        while True:
            logq = (1.0 - eta) * np.log(Q[support]) + eta * target
            logq = np.maximum(logq - logq.max(), LOG_FLOOR)
            Q_new = np.zeros(pw.size)
            Q_new[support] = np.exp(logq)
            Q_new /= Q_new.sum()
            rep_new, F_new = evaluate(Q_new, rep.col_potential)
            if F_new <= F or eta < MIN_STEP:
                break
            eta *= 0.5
        if rep_new is None or F_new > F:
            # no descent left at floating-point resolution
            converged = rep_new is not None
            break
        change = float(np.abs(Q_new - Q).sum())
        Q, rep, F_prev, F = Q_new, rep_new, F, F_new
        if F_prev - F <= 0.1 * tol and change <= math.sqrt(tol):
            converged = True
            break
    refined = {"transport": rep.value, "kl_latent": kl_divergence(Q, pw), "kl_base": kl_base, "total": F + kl_base}
    if refined["total"] <= at_witness["total"]:
        value, Qw, planw = refined["total"], ProbMeasure(Q), rep.plan
    else:
        value, Qw, planw = at_witness["total"], q_star, rep_star.plan
    terms = {"at_witness": at_witness, "refined": refined}
    return RateEvaluation(max(value, 0.0), Qw, planw, "variational", terms, it,
                          converged and rep.converged and rep_star.converged)


def _fw_gradient(x, q):
    """Gradient of KL(x, q); -inf where x_j = 0 < q_j, +inf where q_j = 0."""
    g = np.empty_like(x)
    zq = q <= 0
    zx = (x <= 0) & ~zq
    pos = ~zq & ~zx
    g[pos] = np.log(x[pos] / q[pos]) + 1.0
    g[zx] = -np.inf
    g[zq] = np.inf
    return g


def _fw_vertex(phat, g, delta):
    """Linear minimization over ``{s in simplex : tv(s, phat) <= delta}``.

    Removes up to ``delta`` mass from the largest-gradient coordinates and
    places it on the smallest-gradient coordinate.
    """
    s = phat.copy()
    j_min = int(np.argmin(g))
    budget = delta
    for j in np.argsort(-g, kind="stable"):
        if budget <= 0 or g[j] <= g[j_min]:
            break
        take = min(s[j], budget)
        s[j] -= take
        s[j_min] += take
        budget -= take
    return s


def _kl_dir(x, q, d, gamma):
    """Derivative of gamma -> KL(x + gamma d, q)."""
    y = x + gamma * d
    m = d != 0
    ym = np.maximum(y[m], 1e-300)
    return float(np.sum(d[m] * (np.log(ym / q[m]) + 1.0)))


def _line_search(x, q, d, gmax):
    lo, hi = 0.0, gmax
    if _kl_dir(x, q, d, hi) <= 0:
        return hi
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _kl_dir(x, q, d, mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * max(1.0, gmax):
            break
    return lo


def _frank_wolfe(phat, q, delta, tol, max_iter):
    g = _fw_gradient(phat, q)
    x = _fw_vertex(phat, g, delta)
    active = {x.tobytes(): [x.copy(), 1.0]}
    gap = math.inf
    it = 0
    while it < max_iter:
        it += 1
        g = _fw_gradient(x, q)
        s = _fw_vertex(phat, g, delta)
        d_fw = s - x
        fin = np.isfinite(g)
        # coordinates with infinite gradient have x_j = 0 for every active vertex
        if np.all(fin | (d_fw == 0)):
            gap = float(-np.dot(g[fin], d_fw[fin]))
        else:
            gap = math.inf
        if gap <= tol:
            return x, gap, it, True
        key_a, (v_a, w_a) = max(active.items(), key=lambda kv: float(np.dot(np.where(fin, g, 0.0), kv[1][0])))
        d_a = x - v_a
        away_gain = float(-np.dot(np.where(fin, g, 0.0), d_a)) if np.all(fin | (d_a == 0)) else -math.inf
        if gap >= away_gain or len(active) == 1:
            d, gmax = d_fw, 1.0
            gamma = _line_search(x, q, d, gmax)
            if gamma <= 0:
                return x, gap, it, False
            for v in active.values():
                v[1] *= 1.0 - gamma
            key_s = s.tobytes()
            if gamma >= 1.0:
                active = {key_s: [s.copy(), 1.0]}
            elif key_s in active:
                active[key_s][1] += gamma
            else:
                active[key_s] = [s.copy(), gamma]
        else:
            d, gmax = d_a, w_a / (1.0 - w_a)
            gamma = _line_search(x, q, d, gmax)
            if gamma <= 0:
                return x, gap, it, False
            for v in active.values():
                v[1] *= 1.0 + gamma
            if gamma >= gmax:
                del active[key_a]
            else:
                active[key_a][1] -= gamma
        x = np.clip(x + gamma * d, 0.0, None)
        x /= x.sum()
        active = {k: v for k, v in active.items() if v[1] > 1e-15}
    return x, gap, it, False


def _exact_smoothed(phat, q, delta):
    x = np.empty_like(phat)
    status, a, b = _kernels.smooth_project(phat, q, delta, x)
    if status == _kernels.PROJ_INFEASIBLE:
        return math.inf, None
    if status == _kernels.PROJ_INSIDE:
        return 0.0, x
    return max(_kernels.kl_row(x, q), 0.0), x


def smoothed_rate(p_obs: ProbMeasure, p: ProbMeasure, ch: Channel, delta: float, tol: float = SMOOTHED_TOL,
                  max_iter: int = MAX_ITER, method: str = "frank_wolfe") -> SmoothedRateEvaluation:
    """Smoothed rate ``min {KL(P'', O*P) : tv(P'', P') <= delta}``.

    Parameters
    ----------
    method : {"frank_wolfe", "exact"}
        ``"frank_wolfe"`` runs away-step Frank-Wolfe over the simplex
        intersected with the TV ball, stopping on duality gap ``tol``.
        ``"exact"`` uses the closed-form minimizer ``clip(P', a q, b q)``,
        with ``q = O*P`` and scalars ``a, b`` fixed by the TV budget.

    Returns
    -------
    SmoothedRateEvaluation
        ``value`` is ``inf`` when ``P'`` puts more than ``delta`` mass where
        ``O*P`` vanishes; ``witness_p2`` is then None.
    """
    if not delta >= 0:
        raise DomainError("delta must be nonnegative")
    po, pw = _check(p_obs, p, ch)
    q = pw @ ch.kernel
    q = np.clip(q, 0.0, None)
    if method == "exact":
        value, x = _exact_smoothed(po, q, delta)
        return SmoothedRateEvaluation(value, ProbMeasure(x) if x is not None else None, delta, method="exact")
    if method != "frank_wolfe":
        raise DomainError(f"unknown method {method!r}")
    if delta == 0:
        value = kl_divergence(po, q)
        return SmoothedRateEvaluation(value, ProbMeasure(po) if math.isfinite(value) else None, delta,
                                      method="frank_wolfe")
    if tv_distance(po, q) <= delta:
        return SmoothedRateEvaluation(0.0, ProbMeasure(q / q.sum()), delta, method="frank_wolfe")
    if po[q <= 0].sum() > delta:
        return SmoothedRateEvaluation(math.inf, None, delta, method="frank_wolfe")
    x, gap, it, ok = _frank_wolfe(po, q, delta, tol, max_iter)
    return SmoothedRateEvaluation(max(kl_divergence(x, q), 0.0), ProbMeasure(x), delta, gap, it, ok,
                                  method="frank_wolfe")


def smoothed_rate_gradient(p_obs: ProbMeasure, p, ch: Channel, delta: float) -> np.ndarray:
    """Gradient of ``P -> I^delta(P', P)``, namely ``-K (P''/O*P)`` at the inner minimizer."""
    po, pw = _check(p_obs, p, ch)
    q = pw @ ch.kernel
    value, x = _exact_smoothed(po, q, delta)
    if x is None:
        raise DomainError("smoothed rate is infinite at this prior")
    g = np.empty(pw.size)
    _kernels.smoothed_grad(np.ascontiguousarray(ch.kernel), q, x, g)
    return g
