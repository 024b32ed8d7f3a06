"""Probability measures on finite alphabets, divergences and seeded sampling.

Random streams
--------------
All sampling uses numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence``.  A stream is identified by a master seed (an
unsigned 64-bit integer) plus an optional tuple of non-negative integer keys;
``SeedSequence(master_seed, spawn_key=keys)`` hashes both into the generator
state.  Replication ``i`` of cell ``(N, ...)`` therefore draws from
``substream(seed, N, i)`` and its output does not depend on which worker
computes it or in which order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

NORMALIZATION_SLACK = 1e-9
SEED_MAX = 2**64 - 1


@dataclass(frozen=True, eq=False)
class ProbMeasure:
    """Nonnegative weights on ``{0, ..., size-1}`` summing to one.

    Weight vectors whose sum is within ``1e-9`` of one are renormalized;
    anything further off is rejected, as are negative or non-finite entries.
    """

    weights: np.ndarray

    def __init__(self, weights):
        w = np.array(weights, dtype=float).reshape(-1)
        if w.size == 0:
            raise DomainError("a probability measure needs a nonempty support")
        if not np.all(np.isfinite(w)):
            raise DomainError("weights must be finite")
        if np.any(w < 0):
            raise DomainError(f"weights must be nonnegative, got min {w.min()!r}")
        total = float(w.sum())
        if abs(total - 1.0) > NORMALIZATION_SLACK:
            raise DomainError(f"weights sum to {total!r}, not 1")
        if total != 1.0:
            w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return int(self.weights.size)

    @classmethod
    def uniform(cls, size: int) -> "ProbMeasure":
        if size < 1:
            raise DomainError("size must be positive")
        return cls(np.full(size, 1.0 / size))

    @classmethod
    def dirac(cls, index: int, size: int) -> "ProbMeasure":
        w = np.zeros(size)
        w[index] = 1.0
        return cls(w)

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    def to_json(self) -> list:
        return [float(v) for v in self.weights]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)

    def __len__(self):
        return self.size

    def __eq__(self, other):
        if not isinstance(other, ProbMeasure):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())

    def __repr__(self):
        return f"ProbMeasure({np.array2string(self.weights, precision=6)})"


@dataclass(frozen=True, eq=False)
class BaseWeights:
    """Strictly positive reference weights; need not sum to one."""

    weights: np.ndarray

    def __init__(self, weights):
        w = np.array(weights, dtype=float).reshape(-1)
        if w.size == 0:
            raise DomainError("base weights need a nonempty support")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise DomainError("base weights must be finite and strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return int(self.weights.size)

    @classmethod
    def counting(cls, size: int) -> "BaseWeights":
        return cls(np.ones(size))

    def to_json(self) -> list:
        return [float(v) for v in self.weights]

    def __eq__(self, other):
        if not isinstance(other, BaseWeights):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """Support indices drawn from a seeded stream."""

    indices: np.ndarray
    seed: int

    def __init__(self, indices, seed: int, size: int | None = None):
        idx = np.array(indices, dtype=np.int64).reshape(-1)
        if np.any(idx < 0):
            raise DimensionError("sample indices must be nonnegative")
        if size is not None and idx.size and idx.max() >= size:
            raise DimensionError(f"sample index {int(idx.max())} outside support of size {size}")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "seed", check_seed(seed))

    def __len__(self):
        return int(self.indices.size)

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.indices, other.indices)

    def __hash__(self):
        return hash((self.seed, self.indices.tobytes()))

    def to_json(self) -> dict:
        return {"seed": int(self.seed), "indices": [int(i) for i in self.indices]}

    @classmethod
    def from_json(cls, obj: dict, size: int | None = None) -> "SampleRecord":
        return cls(obj["indices"], obj["seed"], size=size)


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= SEED_MAX:
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *keys)``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def as_weights(m) -> np.ndarray:
    if isinstance(m, (ProbMeasure, BaseWeights)):
        return m.weights
    return np.asarray(m, dtype=float)


def _check_same_size(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"size mismatch: {a.shape[0]} vs {b.shape[0]}")


def kl_divergence(p, q) -> float:
    """Relative entropy ``sum_i p_i log(p_i / q_i)``.

    ``q`` may be a probability measure or unnormalized base weights.  Terms
    with ``p_i = 0`` contribute zero; any ``p_i > 0`` with ``q_i = 0`` makes the
    result ``math.inf``.
    """
    pw, qw = as_weights(p), as_weights(q)
    _check_same_size(pw, qw)
    mask = pw > 0
    if np.any(qw[mask] <= 0):
        return math.inf
    pm, qm = pw[mask], qw[mask]
    return float(np.sum(pm * np.log(pm / qm)))


def tv_distance(p, q) -> float:
    """Total variation distance ``(1/2) sum_i |p_i - q_i|``."""
    pw, qw = as_weights(p), as_weights(q)
    _check_same_size(pw, qw)
    return float(0.5 * np.abs(pw - qw).sum())


def empirical_measure(samples, size: int) -> ProbMeasure:
    idx = samples.indices if isinstance(samples, SampleRecord) else np.asarray(samples, dtype=np.int64)
    if idx.size == 0:
        raise DomainError("empirical measure of an empty sample")
    if idx.min() < 0 or idx.max() >= size:
        raise DimensionError(f"sample indices must lie in [0, {size})")
    counts = np.bincount(idx, minlength=size)
    return ProbMeasure(counts / idx.size)


def inverse_cdf(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Map uniforms on [0, 1) to indices; zero-mass indices are never hit."""
    cdf = np.cumsum(weights)
    idx = np.searchsorted(cdf, u, side="right")
    # rounding can leave cdf[-1] slightly below 1
    last = int(np.flatnonzero(weights > 0)[-1])
    return np.minimum(idx, last)


def sample_iid(p: ProbMeasure, n: int, seed: int) -> SampleRecord:
    """Draw ``n`` i.i.d. indices from ``p`` by inverse CDF on ``substream(seed)``."""
    if n < 1:
        raise DomainError("sample size must be at least 1")
    rng = substream(seed)
    idx = inverse_cdf(p.weights, rng.random(n))
    return SampleRecord(idx, seed, size=p.size)
