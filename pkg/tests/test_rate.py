import math

import numpy as np
import pytest

from noisy_ot import _kernels
from noisy_ot.channels import channel_from_cost, channel_irrelevant, channel_noiseless, convolve
from noisy_ot.errors import DimensionError, DomainError
from noisy_ot.measures import ProbMeasure, kl_divergence, tv_distance
from noisy_ot.rate import rate_closed_form, rate_variational, smoothed_rate, smoothed_rate_gradient
from noisy_ot.transport import kl_chain_decomposition

K2 = np.array([[0.9, 0.1], [0.2, 0.8]])
CH2 = channel_from_cost(-np.log(K2))
# KL([0.7, 0.3], [0.55, 0.45])
RATE_2X2 = 0.047173907339372184


def random_instance(rng, n=None, m=None, sparse=False):
    n = n or int(rng.integers(1, 9))
    m = m or int(rng.integers(1, 9))
    K = rng.dirichlet(np.ones(m) * 0.7, size=n)
    if sparse:
        K[rng.random(K.shape) < 0.3] = 0.0
        for i in range(n):
            if K[i].sum() == 0:
                K[i, rng.integers(m)] = 1.0
        K /= K.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        ch = channel_from_cost(-np.log(K))
    p = ProbMeasure(rng.dirichlet(np.ones(n)))
    return ch, p


def grid_smoothed(po, q, delta, points=10**6):
    t = np.linspace(0.0, 1.0, points + 1)
    t = t[np.abs(t - po[0]) <= delta + 1e-15]
    x = np.stack([t, 1 - t], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(x > 0, x * np.log(x / q), 0.0).sum(axis=1)
    return float(vals.min())


def test_closed_form_noiseless():
    ev = rate_closed_form(ProbMeasure([1, 0]), ProbMeasure([0.5, 0.5]), channel_noiseless(2))
    assert ev.value == pytest.approx(math.log(2), abs=1e-15)


def test_closed_form_zero_at_pushforward():
    rng = np.random.default_rng(0)
    ch, p = random_instance(rng, 4, 5)
    assert rate_closed_form(convolve(ch, p), p, ch).value <= 1e-12


def test_closed_form_pinned():
    ev = rate_closed_form(ProbMeasure([0.7, 0.3]), ProbMeasure([0.5, 0.5]), CH2)
    assert ev.value == pytest.approx(RATE_2X2, abs=1e-14)
    T = ev.witness_plan.matrix
    np.testing.assert_allclose(T.sum(axis=0), [0.7, 0.3], atol=1e-15)
    np.testing.assert_allclose(ev.witness_q.weights, T.sum(axis=1), atol=1e-15)
    # T'_ij = P'_j T(P)_ij / (O*P)_j
    np.testing.assert_allclose(T[0, 0], 0.7 * 0.45 / 0.55, atol=1e-15)


def test_closed_form_infinite():
    ev = rate_closed_form(ProbMeasure([0.5, 0.5]), ProbMeasure([1, 0]), channel_noiseless(2))
    assert ev.value == math.inf and ev.witness_q is None and ev.witness_plan is None


def test_closed_form_dimension_error():
    with pytest.raises(DimensionError):
        rate_closed_form(ProbMeasure([1.0]), ProbMeasure([0.5, 0.5]), CH2)


def test_variational_matches_closed_form_pinned():
    po, p = ProbMeasure([0.7, 0.3]), ProbMeasure([0.5, 0.5])
    ev = rate_variational(po, p, CH2)
    assert abs(ev.value - RATE_2X2) <= 1e-6
    for key in ("at_witness", "refined"):
        t = ev.terms[key]
        assert t["total"] == pytest.approx(t["transport"] + t["kl_latent"] + t["kl_base"], abs=1e-12)


def test_variational_noiseless_witness_is_p_obs():
    po, p = ProbMeasure([0.2, 0.3, 0.5]), ProbMeasure([0.4, 0.4, 0.2])
    ev = rate_variational(po, p, channel_noiseless(3))
    np.testing.assert_allclose(ev.witness_q.weights, po.weights, atol=1e-9)
    assert ev.value == pytest.approx(kl_divergence(po, p), abs=1e-9)


def test_variational_zero_rate_terms_sum_to_zero():
    rng = np.random.default_rng(1)
    ch, p = random_instance(rng, 3, 4)
    ev = rate_variational(convolve(ch, p), p, ch)
    assert abs(ev.terms["at_witness"]["total"]) <= 1e-9
    assert ev.value <= 1e-9


def test_variational_random_with_zeros():
    rng = np.random.default_rng(2)
    for _ in range(25):
        ch, p = random_instance(rng, sparse=True)
        po = ProbMeasure(rng.dirichlet(np.ones(ch.n_obs)))
        closed = rate_closed_form(po, p, ch).value
        var = rate_variational(po, p, ch).value
        if math.isinf(closed):
            assert math.isinf(var)
        else:
            assert abs(var - closed) <= 1e-6


def test_chain_at_witness_reproduces_rate():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ch, p = random_instance(rng)
        po = ProbMeasure(rng.dirichlet(np.ones(ch.n_obs)))
        ev = rate_closed_form(po, p, ch)
        dec = kl_chain_decomposition(ev.witness_plan, ch, p)
        assert abs(dec.total - ev.value) <= 1e-9


def test_smoothed_delta_zero_is_closed_form():
    po, p = ProbMeasure([0.7, 0.3]), ProbMeasure([0.5, 0.5])
    for method in ("frank_wolfe", "exact"):
        assert smoothed_rate(po, p, CH2, 0.0, method=method).value == pytest.approx(RATE_2X2, abs=1e-12)


def test_smoothed_inside_ball_is_zero():
    po, p = ProbMeasure([0.7, 0.3]), ProbMeasure([0.5, 0.5])
    ev = smoothed_rate(po, p, CH2, 0.15 + 1e-12)
    assert ev.value == 0.0
    np.testing.assert_allclose(ev.witness_p2.weights, [0.55, 0.45], atol=1e-12)


@pytest.mark.parametrize("po0,delta", [(0.9, 0.1), (0.95, 0.02), (0.3, 0.1), (1.0, 0.3)])
def test_smoothed_grid_oracle(po0, delta):
    po, p = ProbMeasure([po0, 1 - po0]), ProbMeasure([0.5, 0.5])
    q = convolve(CH2, p).weights
    oracle = grid_smoothed(po.weights, q, delta)
    for method in ("frank_wolfe", "exact"):
        ev = smoothed_rate(po, p, CH2, delta, method=method)
        assert abs(ev.value - oracle) <= 1e-5
        assert tv_distance(ev.witness_p2, po) <= delta + 1e-9
        assert ev.value <= rate_closed_form(ev.witness_p2, p, CH2).value + 1e-12


def test_smoothed_pinned_value():
    # witness is [0.8, 0.2], the ball point nearest O*P
    ev = smoothed_rate(ProbMeasure([0.9, 0.1]), ProbMeasure([0.5, 0.5]), CH2, 0.1, method="exact")
    assert ev.value == pytest.approx(0.8 * math.log(0.8 / 0.55) + 0.2 * math.log(0.2 / 0.45), abs=1e-12)


def test_smoothed_frank_wolfe_matches_exact_random():
    rng = np.random.default_rng(4)
    for _ in range(40):
        ch, p = random_instance(rng, sparse=True)
        po = ProbMeasure(rng.dirichlet(np.ones(ch.n_obs) * 0.5))
        delta = float(rng.uniform(0, 0.4))
        fw = smoothed_rate(po, p, ch, delta)
        ex = smoothed_rate(po, p, ch, delta, method="exact")
        if math.isinf(ex.value):
            assert math.isinf(fw.value)
        else:
            assert fw.converged
            assert abs(fw.value - ex.value) <= 1e-6


def test_smoothed_infinite_when_mass_outside_support():
    ev = smoothed_rate(ProbMeasure([0.5, 0.5]), ProbMeasure([1, 0]), channel_noiseless(2), 0.2)
    assert ev.value == math.inf and ev.witness_p2 is None
    ev = smoothed_rate(ProbMeasure([0.5, 0.5]), ProbMeasure([1, 0]), channel_noiseless(2), 0.5)
    assert ev.value == 0.0


def test_smoothed_negative_delta():
    with pytest.raises(DomainError):
        smoothed_rate(ProbMeasure([0.5, 0.5]), ProbMeasure([0.5, 0.5]), CH2, -0.1)


def test_smoothed_irrelevant_channel_constant_in_p():
    ch = channel_irrelevant(ProbMeasure([0.3, 0.7]), 3)
    po = ProbMeasure([0.9, 0.1])
    a = smoothed_rate(po, ProbMeasure([1, 0, 0]), ch, 0.1).value
    b = smoothed_rate(po, ProbMeasure([0.2, 0.2, 0.6]), ch, 0.1).value
    assert a == pytest.approx(b, abs=1e-9)


def test_smoothed_gradient_finite_differences():
    rng = np.random.default_rng(5)
    ch, _ = random_instance(rng, 4, 5)
    po = ProbMeasure(rng.dirichlet(np.ones(5)))
    P = rng.dirichlet(np.ones(4))
    g = smoothed_rate_gradient(po, P, ch, 0.05)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        # I^delta extends to unnormalized P through q = K^T P
        up = _unnormalized(po, P + e, ch, 0.05)
        dn = _unnormalized(po, P - e, ch, 0.05)
        assert (up - dn) / (2 * h) == pytest.approx(g[i], rel=1e-4, abs=1e-7)


def _unnormalized(po, P, ch, delta):
    K = np.ascontiguousarray(ch.kernel)
    q, x = np.empty(K.shape[1]), np.empty(K.shape[1])
    return _kernels.smoothed_value(np.ascontiguousarray(P), K, np.ascontiguousarray(po.weights), delta, q, x)[0]
