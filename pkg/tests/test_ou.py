import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unsyncse.ou import (OuLoadState, OuParams, OuPath, innovation_std, sample_step, stale_variance,
                         variance_update)

# frozen from direct evaluation of exp(-0.0125) and 1 - exp(-0.025)
DECAY_1S = 0.98757780049388144
GROWTH_1S = 0.024690087971667385


def unit_params(theta=0.0125, dt=1.0):
    # stationary variance 1
    return OuParams(theta, math.sqrt(2 * theta), dt)


@pytest.mark.parametrize("kwargs", [dict(theta=0, sigma_ou=1, dt=1), dict(theta=1, sigma_ou=-1, dt=1),
                                    dict(theta=1, sigma_ou=1, dt=0)])
def test_param_validation(kwargs):
    with pytest.raises(ValueError):
        OuParams(**kwargs)


def test_decay_factor():
    assert unit_params().decay == pytest.approx(DECAY_1S, abs=1e-15)
    assert 0 < unit_params().gamma <= 1


def test_noiseless_step_is_pure_decay():
    p = OuParams(0.0125, 0.0, 1.0)
    s = sample_step(OuLoadState(1 + 2j, 1 + 2j, 0), p, np.random.default_rng(0))
    assert s.s_now == pytest.approx((1 + 2j) * DECAY_1S)


def test_variance_update_examples():
    p = unit_params()
    assert variance_update(0.0, p) == pytest.approx(GROWTH_1S, abs=1e-15)
    assert variance_update(p.stationary_var, p) == p.stationary_var


def test_stale_variance_limits():
    p = unit_params()
    assert stale_variance(p, 0.0) == 0.0
    assert stale_variance(p, 1e6) == pytest.approx(p.stationary_var)
    with pytest.raises(ValueError):
        stale_variance(p, -1.0)


def test_closed_form_matches_four_iterations():
    p = unit_params()
    v = 0.0
    for _ in range(4):
        v = variance_update(v, p)
    assert abs(v - stale_variance(p, 4.0)) <= 1e-12


def test_recursion_matches_closed_form_long_run():
    p = OuParams(0.0125, 0.3, 1 / 60)
    k = np.arange(1, 100_001)
    closed = stale_variance(p, k * p.dt)
    v, worst = 0.0, 0.0
    for i in range(100_000):
        v = variance_update(v, p)
        worst = max(worst, abs(v - closed[i]))
    assert worst <= 1e-12


def test_recursion_converges_geometrically():
    p = unit_params(theta=0.3)
    v, gaps = 0.0, []
    for _ in range(30):
        v = variance_update(v, p)
        gaps.append(p.stationary_var - v)
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    assert np.allclose(ratios, p.gamma)


def test_monte_carlo_variance_and_mean():
    p = OuParams(0.0125, 0.02, 1.0)
    start = 0.5 + 0.25j
    path = OuPath([p] * 100_000, np.random.default_rng(123), x0=np.full(100_000, start))
    x = path.advance(100)[-1]
    expect_var = stale_variance(p, 100.0)
    assert np.var(x) == pytest.approx(expect_var, rel=0.05)
    mean = start * math.exp(-p.theta * 100)
    se = math.sqrt(expect_var / 2 / len(x))
    assert abs(x.real.mean() - mean.real) < 3 * se
    assert abs(x.imag.mean() - mean.imag) < 3 * se


def test_innovation_split_equally_between_axes():
    p = OuParams(0.5, 0.4, 0.1)
    assert 2 * innovation_std(p) ** 2 == pytest.approx(p.stationary_var * (1 - p.gamma))


def test_staleness_resets_and_grows():
    p = unit_params()
    rng = np.random.default_rng(1)
    s = OuLoadState(1j, 1j, 0)
    trace = []
    for k in range(1, 6):
        s = sample_step(s, p, rng)
        trace.append(s.staleness_var)
    assert all(a < b for a, b in zip(trace, trace[1:]))
    assert max(trace) <= p.stationary_var + 1e-12
    fresh = s.acquire(5)
    assert fresh.staleness_var == 0.0 and fresh.s_anchor == s.s_now and fresh.anchor_tick == 5


def test_path_chunked_equals_stepwise():
    params = [OuParams(0.0125, 0.01 * (i + 1), 1 / 60) for i in range(4)]
    a = OuPath(params, np.random.default_rng(5))
    b = OuPath(params, np.random.default_rng(5))
    stepped = np.array([a.step() for _ in range(50)])
    chunked = np.concatenate([b.advance(20), b.advance(30)])
    assert np.allclose(stepped, chunked, rtol=0, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 2.0), st.floats(1e-3, 1.0), st.floats(1e-3, 1.0), st.integers(1, 200))
def test_closed_form_is_iterated_recursion(theta, sigma, dt, k):
    p = OuParams(theta, sigma, dt)
    v = 0.0
    for _ in range(k):
        v = variance_update(v, p)
    assert v == pytest.approx(stale_variance(p, k * dt), rel=1e-10, abs=1e-15)
    assert 0 <= v <= p.stationary_var * (1 + 1e-12)
