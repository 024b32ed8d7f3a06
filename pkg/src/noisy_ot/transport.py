"""Entropic optimal transport with unit regularization.

The distance between ``mu`` on the latent alphabet and ``nu`` on the observed
alphabet is

    D_W(mu, nu) = min_{T in Pi(mu, nu)}  sum_ij T_ij d_ij + KL(T, mu (x) nu)

whose minimizer has the form ``T_ij = mu_i nu_j exp(f_i + g_j - d_ij)``.  The
potentials are found by Sinkhorn scaling in the log domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import _kernels
from .channels import Channel
from .errors import DimensionError, NoFeasiblePlanError
from .measures import ProbMeasure, as_weights, kl_divergence

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
CHECKPOINT_EVERY = 10


@dataclass(frozen=True, eq=False)
class TransportPlan:
    matrix: np.ndarray
    row_marginal: ProbMeasure
    col_marginal: ProbMeasure

    def to_json(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "row_marginal": self.row_marginal.to_json(),
            "col_marginal": self.col_marginal.to_json(),
        }


@dataclass(frozen=True, eq=False)
class SinkhornReport:
    value: float
    plan: TransportPlan
    iterations: int
    final_marginal_error: float
    converged: bool
    tol: float
    checkpoints: list = field(default_factory=list)
    row_potential: np.ndarray | None = None
    col_potential: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "iterations": self.iterations,
            "final_marginal_error": self.final_marginal_error,
            "converged": self.converged,
            "tol": self.tol,
            "checkpoints": [[int(k), float(e)] for k, e in self.checkpoints],
            "plan": self.plan.to_json(),
        }


def _plan_exists(mu, nu, finite):
    """LP feasibility of a coupling supported on the finite-cost entries."""
    rows, cols = np.nonzero(finite)
    n, m = finite.shape
    A = np.zeros((n + m, rows.size))
    A[rows, np.arange(rows.size)] = 1.0
    A[n + cols, np.arange(rows.size)] = 1.0
    res = linprog(np.zeros(rows.size), A_eq=A, b_eq=np.concatenate([mu, nu]), bounds=(0, None), method="highs")
    return res.status == 0


def eot_distance(mu, nu, cost, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 init_col_potential=None) -> SinkhornReport:
    """Entropic optimal transport distance and plan by log-domain Sinkhorn.

    Parameters
    ----------
    mu, nu : ProbMeasure
        Row and column marginals.
    cost : array_like
        ``len(mu) x len(nu)`` costs; ``inf`` forbids an entry.
    tol : float
        Stop once ``max(L1 row error, L1 column error) <= tol``.
    max_iter : int
        Iteration cap; on overrun the report has ``converged=False``.
    init_col_potential : array_like, optional
        Warm start for the column potential ``g``.

    Returns
    -------
    SinkhornReport
        ``checkpoints`` lists ``(iteration, marginal error)`` every
        ``CHECKPOINT_EVERY`` iterations.

    Raises
    ------
    NoFeasiblePlanError
        If no coupling of ``mu`` and ``nu`` avoids the infinite costs.
    """
    a_full, b_full = as_weights(mu), as_weights(nu)
    d = np.asarray(cost, dtype=float)
    if d.shape != (a_full.size, b_full.size):
        raise DimensionError(f"cost has shape {d.shape}, marginals have sizes {a_full.size}, {b_full.size}")
    if np.any(np.isnan(d)) or np.any(d == -np.inf):
        raise DimensionError("costs must be real or +inf")
    rows = np.flatnonzero(a_full > 0)
    cols = np.flatnonzero(b_full > 0)
    a, b = a_full[rows], b_full[cols]
    ds = d[np.ix_(rows, cols)]
    finite = np.isfinite(ds)
    if not finite.all():
        bad_row = np.flatnonzero(~finite.any(axis=1))
        bad_col = np.flatnonzero(~finite.any(axis=0))
        if bad_row.size or bad_col.size:
            where = f"row {rows[bad_row[0]]}" if bad_row.size else f"column {cols[bad_col[0]]}"
            raise NoFeasiblePlanError(f"{where} has no finite-cost partner in the other support")
        if not _plan_exists(a, b, finite):
            raise NoFeasiblePlanError("marginal supports admit no finite-cost coupling")
    la, lb = np.log(a), np.log(b)
    # log T = M_ij + f_i + g_j with M = log a_i + log b_j - d_ij
    M = np.ascontiguousarray(-ds + la[:, None] + lb[None, :])
    f = np.zeros(rows.size)
    g = np.zeros(cols.size) if init_col_potential is None else np.asarray(init_col_potential, float)[cols].copy()
    errs = np.empty(max_iter // CHECKPOINT_EVERY + 1)
    it, err, nck = _kernels.sinkhorn_log(M, a, b, f, g, tol, max_iter, CHECKPOINT_EVERY, errs)
    checkpoints = [((k + 1) * CHECKPOINT_EVERY, float(errs[k])) for k in range(nck)]
    if not checkpoints or checkpoints[-1][0] != it:
        checkpoints.append((it, float(err)))
    logT = M + f[:, None] + g[None, :]
    T_sub = np.exp(logT)
    T = np.zeros_like(d)
    T[np.ix_(rows, cols)] = T_sub
    # sum T (d + log T/(a b)) = sum T (f_i + g_j) on the support
    pos = T_sub > 0
    value = float(np.sum((T_sub * (f[:, None] + g[None, :]))[pos]))
    f_full = np.zeros(a_full.size)
    g_full = np.zeros(b_full.size)
    f_full[rows] = f
    g_full[cols] = g
    plan = TransportPlan(T, ProbMeasure(a_full), ProbMeasure(b_full))
    return SinkhornReport(value, plan, int(it), float(err), bool(err <= tol), tol, checkpoints, f_full, g_full)


def _plan_objective(T, d, a, b):
    pos = T > 0
    logprod = np.log(a)[:, None] + np.log(b)[None, :]
    return float(np.sum(T[pos] * d[pos]) + np.sum(T[pos] * (np.log(T[pos]) - logprod[pos])))


def plan_objective(T, cost) -> float:
    """``sum T d + KL(T, row(T) (x) col(T))`` for any plan ``T``."""
    T = np.asarray(T, dtype=float)
    return _plan_objective(T, np.asarray(cost, dtype=float), T.sum(axis=1), T.sum(axis=0))


def _matrix_kl(A, B):
    pos = A > 0
    if np.any(B[pos] <= 0):
        return math.inf
    return float(np.sum(A[pos] * np.log(A[pos] / B[pos])))


@dataclass(frozen=True)
class ChainDecomposition:
    """Terms of ``KL(T', T(P)) = <d, T'> + KL(T', Q (x) P'') + KL(Q, P) + KL(P'', m')``."""

    transport: float
    mutual_information: float
    kl_latent: float
    kl_base: float
    total: float
    direct: float
    violation: tuple | None = None

    def to_json(self) -> dict:
        keys = ("transport", "mutual_information", "kl_latent", "kl_base", "total", "direct")
        out = {k: getattr(self, k) for k in keys}
        out["violation"] = list(self.violation) if self.violation else None
        return out


def kl_chain_decomposition(tp, ch: Channel, p) -> ChainDecomposition:
    """Split ``KL(T', T(P))`` into transport, dependence and marginal terms.

    ``Q`` and ``P''`` are the row and column marginals of ``T'``.  When
    ``T'`` charges an entry where ``T(P)`` vanishes every term is ``inf`` and
    ``violation`` holds that entry's index.
    """
    T = np.asarray(getattr(tp, "matrix", tp), dtype=float)
    pw = as_weights(p)
    if T.shape != ch.kernel.shape or pw.size != T.shape[0]:
        raise DimensionError("plan, channel and prior sizes disagree")
    ref = pw[:, None] * ch.kernel
    bad = np.argwhere((T > 0) & (ref <= 0))
    if bad.size:
        inf = math.inf
        return ChainDecomposition(inf, inf, inf, inf, inf, inf, tuple(int(v) for v in bad[0]))
    q = T.sum(axis=1)
    p2 = T.sum(axis=0)
    pos = T > 0
    transport = float(np.sum(T[pos] * ch.cost[pos]))
    mi = _matrix_kl(T, q[:, None] * p2[None, :])
    kl_latent = kl_divergence(q, pw)
    kl_base = kl_divergence(p2, ch.base)
    direct = _matrix_kl(T, ref)
    return ChainDecomposition(transport, mi, kl_latent, kl_base, transport + mi + kl_latent + kl_base, direct)
