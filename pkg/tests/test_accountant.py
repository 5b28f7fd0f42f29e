import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knormlab.accountant import (DEFAULT_ORDERS, PrivacyAccountant, calibrate_sigma, eps_from_rdp,
                                 rdp_epsilon, rdp_subsampled_gaussian)
from knormlab.errors import ConfigError, ContractError

from oracles import gaussian_eps_closed_form, rdp_quadrature

N = 50_000
DELTA = 1e-5


@pytest.mark.parametrize("q,sigma,alpha", [
    (0.01, 1.0, 2), (0.01, 1.0, 8), (0.05, 0.8, 3), (0.2, 2.0, 16), (0.0614, 1.3, 5),
    (0.01, 1.0, 1.5), (0.05, 0.8, 2.25), (0.2, 2.0, 3.75), (0.0102, 1.1, 1.25), (0.3, 4.0, 10.5),
])
def test_rdp_matches_quadrature(q, sigma, alpha):
    assert rdp_subsampled_gaussian(q, sigma, alpha) == pytest.approx(rdp_quadrature(q, sigma, alpha), rel=1e-7)


@pytest.mark.parametrize("sigma", [0.7, 1.0, 2.5, 10.0])
def test_full_batch_matches_closed_form(sigma):
    got = rdp_epsilon(1.0, sigma, 1, DELTA)
    want = gaussian_eps_closed_form(sigma, 1, DELTA, DEFAULT_ORDERS)
    assert abs(got - want) <= 1e-3 * want


def test_full_batch_rdp_is_exact():
    for a in (1.5, 2, 7.25, 32):
        assert rdp_subsampled_gaussian(1.0, 1.7, a) == a / (2 * 1.7**2)


def test_published_reference_value():
    # 60k samples, batch 256, 60 epochs, sigma 1.1 -> about 3.0 at delta 1e-5
    q = 256 / 60000
    steps = 60 * 60000 // 256
    assert rdp_epsilon(q, 1.1, steps, DELTA) == pytest.approx(3.01, abs=0.03)


@pytest.mark.parametrize("epochs", [50, 70])
@pytest.mark.parametrize("batch", [512, 1024, 2048, 3072])
def test_calibrate_round_trip(batch, epochs):
    q = batch / N
    steps = epochs * math.ceil(N / batch)
    sigma = calibrate_sigma(6.0, DELTA, q, steps)
    e = rdp_epsilon(q, sigma, steps, DELTA)
    assert 0.99 * 6.0 <= e <= 6.0


def test_calibrate_unreachable():
    with pytest.raises(ConfigError):
        calibrate_sigma(1e-9, DELTA, 1.0, 10**6, ceiling=10.0)


def test_monotonicity_grid():
    qs, sigmas, ts = (0.005, 0.02, 0.08), (0.6, 1.2, 3.0), (10, 300, 5000)
    eps = {(q, s, t): rdp_epsilon(q, s, t, DELTA) for q, s, t in itertools.product(qs, sigmas, ts)}
    assert len(eps) == 27
    for (q, s, t), e in eps.items():
        assert rdp_epsilon(q, s, 2 * t, DELTA) >= e
        i, j, k = qs.index(q), sigmas.index(s), ts.index(t)
        if i + 1 < 3:
            assert eps[(qs[i + 1], s, t)] >= e
        if j + 1 < 3:
            assert eps[(q, sigmas[j + 1], t)] <= e
        if k + 1 < 3:
            assert eps[(q, s, ts[k + 1])] >= e


@settings(max_examples=30)
@given(q=st.floats(1e-3, 0.5), sigma=st.floats(0.5, 5.0), t=st.integers(1, 2000))
def test_doubling_steps_never_lowers_epsilon(q, sigma, t):
    assert rdp_epsilon(q, sigma, 2 * t, DELTA) >= rdp_epsilon(q, sigma, t, DELTA)


def test_edge_cases():
    assert rdp_epsilon(0.1, 1.0, 0, DELTA) == 0.0
    assert rdp_epsilon(0.1, 0.0, 5, DELTA) == math.inf
    for bad in (dict(q=0.0), dict(q=1.5), dict(sigma=-1.0), dict(delta=0.0)):
        kw = dict(q=0.1, sigma=1.0, steps=10, delta=DELTA) | bad
        with pytest.raises(ContractError):
            rdp_epsilon(**kw)


def test_accountant_composes_linearly():
    acct = PrivacyAccountant(0.02, 1.1, DELTA)
    for _ in range(5):
        acct.step(20)
    assert acct.epsilon() == rdp_epsilon(0.02, 1.1, 100, DELTA)


def test_eps_from_rdp_picks_minimum():
    orders = np.array([2.0, 4.0, 8.0])
    rdp = np.array([1.0, 1.0, 1.0])
    e, a = eps_from_rdp(rdp, orders, DELTA)
    assert a == 8.0 and e == pytest.approx(1 + math.log(1e5) / 7)
