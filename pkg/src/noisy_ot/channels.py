"""Observation channels on finite alphabets.

A channel maps each latent point ``i`` to a probability measure ``O_i`` over
observed points.  It is stored through a cost matrix ``d`` and positive base
weights ``m'`` with kernel ``K[i, j] = exp(-d[i, j]) * m'[j]``; every kernel
row is a probability vector and ``K[i, j] == 0`` exactly when ``d[i, j]`` is
``+inf``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, InvalidChannelError
from .measures import BaseWeights, ProbMeasure, SampleRecord, as_weights, inverse_cdf, substream

ROW_SUM_SLACK = 1e-6
RENORMALIZE_SLACK = 1e-12
UNDERFLOW = 1e-300


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Channel:
    cost: np.ndarray
    base: BaseWeights
    kernel: np.ndarray

    @property
    def n_latent(self) -> int:
        return int(self.kernel.shape[0])

    @property
    def n_obs(self) -> int:
        return int(self.kernel.shape[1])

    def to_json(self) -> dict:
        cost = [[("inf" if np.isinf(v) else float(v)) for v in row] for row in self.cost]
        return {"cost": cost, "base": self.base.to_json(), "inf_token": "inf"}

    @classmethod
    def from_json(cls, obj: dict) -> "Channel":
        token = obj.get("inf_token", "inf")
        cost = [[(np.inf if v == token else float(v)) for v in row] for row in obj["cost"]]
        return channel_from_cost(cost, BaseWeights(obj["base"]))

    def __eq__(self, other):
        if not isinstance(other, Channel):
            return NotImplemented
        return np.array_equal(self.cost, other.cost) and self.base == other.base


@dataclass(frozen=True, eq=False)
class JointMeasure:
    matrix: np.ndarray

    def __post_init__(self):
        m = self.matrix
        if np.any(m < 0):
            raise DomainError("joint measure entries must be nonnegative")
        if abs(m.sum() - 1.0) > 1e-12:
            raise DomainError(f"joint measure has total mass {m.sum()!r}")

    def row_marginal(self) -> ProbMeasure:
        return ProbMeasure(self.matrix.sum(axis=1))

    def col_marginal(self) -> ProbMeasure:
        return ProbMeasure(self.matrix.sum(axis=0))


def _kernel_from_cost(cost, base):
    with np.errstate(over="ignore"):
        return np.exp(-cost) * base[None, :]


def _cost_from_kernel(K, mb):
    with np.errstate(divide="ignore"):
        return -np.log(K / mb[None, :])


def channel_from_cost(cost, base: BaseWeights | None = None) -> Channel:
    """Build a channel from costs ``d`` (``inf`` allowed) and base weights ``m'``.

    Rows of ``exp(-d) * m'`` must already sum to one within ``1e-6``; they are
    then renormalized, kernel entries below ``1e-300`` are flushed to zero and
    the cost of every changed row is recomputed as ``-log(K / m')`` so the
    stored pair is exactly consistent.

    Raises
    ------
    InvalidChannelError
        If a row sum is off by more than ``1e-6`` (the row index is attached).
    """
    d = np.array(cost, dtype=float)
    if d.ndim != 2 or d.size == 0:
        raise DimensionError("cost must be a nonempty matrix")
    if base is None:
        base = BaseWeights.counting(d.shape[1])
    mb = base.weights
    if mb.size != d.shape[1]:
        raise DimensionError(f"base has size {mb.size}, cost has {d.shape[1]} columns")
    if np.any(np.isnan(d)) or np.any(d == -np.inf):
        raise InvalidChannelError("costs must be real or +inf")
    K = _kernel_from_cost(d, mb)
    sums = K.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_SLACK)
    if bad.size:
        row = int(bad[0])
        raise InvalidChannelError(f"kernel row {row} sums to {sums[row]!r}, not 1", row=row)
    fix = np.abs(sums - 1.0) > RENORMALIZE_SLACK
    K[fix] /= sums[fix, None]
    flush = (K < UNDERFLOW) & np.isfinite(d)
    K[flush] = 0.0
    # only touched rows get a recomputed cost, so a channel that is already
    # canonical (e.g. reloaded from JSON) is reproduced bit for bit
    touched = fix | flush.any(axis=1)
    if touched.any():
        d[touched] = _cost_from_kernel(K[touched], mb)
        K = _kernel_from_cost(d, mb)
    return Channel(_readonly(d), base, _readonly(K))


def channel_noiseless(n: int) -> Channel:
    if n < 1:
        raise DomainError("alphabet size must be positive")
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    return channel_from_cost(d)


def channel_irrelevant(target: ProbMeasure, n: int) -> Channel:
    """Every latent point emits ``target``; zero target entries get cost ``inf``."""
    if n < 1:
        raise DomainError("alphabet size must be positive")
    with np.errstate(divide="ignore"):
        row = -np.log(target.weights)
    return channel_from_cost(np.tile(row, (n, 1)))


def channel_gaussian_grid(source_grid, obs_grid, sigma: float) -> Channel:
    """Discretized Gaussian noise ``O_s`` proportional to ``exp(-(s - o)^2 / (2 sigma^2))``.

    Each row is normalized over the observation grid in the log domain and the
    cost recomputed against counting base weights.
    """
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    s = np.asarray(source_grid, dtype=float)
    o = np.asarray(obs_grid, dtype=float)
    for name, g in (("source", s), ("observation", o)):
        if g.ndim != 1 or g.size == 0:
            raise DomainError(f"{name} grid must be a nonempty sequence")
        if np.any(np.diff(g) <= 0):
            raise DomainError(f"{name} grid must be strictly increasing")
    e = (s[:, None] - o[None, :]) ** 2 / (2.0 * sigma**2)
    lse = -e.min(axis=1) + np.log(np.exp(-(e - e.min(axis=1, keepdims=True))).sum(axis=1))
    return channel_from_cost(e + lse[:, None])


def _check_latent(ch: Channel, p) -> np.ndarray:
    w = as_weights(p)
    if w.size != ch.n_latent:
        raise DimensionError(f"measure has size {w.size}, channel has {ch.n_latent} latent points")
    return w


def convolve(ch: Channel, p: ProbMeasure) -> ProbMeasure:
    """Law of a noisy observation, ``(O*P)_j = sum_i p_i K_ij``."""
    w = _check_latent(ch, p)
    q = w @ ch.kernel
    return ProbMeasure(np.clip(q, 0.0, None) / q.sum())


def joint_measure(ch: Channel, p: ProbMeasure) -> JointMeasure:
    w = _check_latent(ch, p)
    return JointMeasure(_readonly(w[:, None] * ch.kernel))


def sample_noisy_indices(p: np.ndarray, K: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Latent draws by inverse CDF of ``p``, then one observation per draw.

    All ``n`` latent uniforms are drawn before the ``n`` observation uniforms.
    """
    latent = inverse_cdf(p, rng.random(n))
    u = rng.random(n)
    cdf = np.cumsum(K, axis=1)
    obs = (u[:, None] >= cdf[latent]).sum(axis=1)
    last = K.shape[1] - 1 - np.argmax(K[:, ::-1] > 0, axis=1)
    return np.minimum(obs, last[latent])


def sample_noisy(p: ProbMeasure, ch: Channel, n: int, seed: int) -> SampleRecord:
    """Observed indices of ``n`` noisy draws: ``xi ~ p`` then ``xi' ~ O_xi``."""
    _check_latent(ch, p)
    if n < 1:
        raise DomainError("sample size must be at least 1")
    idx = sample_noisy_indices(p.weights, ch.kernel, n, substream(seed))
    return SampleRecord(idx, seed, size=ch.n_obs)
