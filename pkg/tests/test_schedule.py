import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from versediff.schedule import NoiseSchedule, build_schedule, posterior_coefficients


def test_default_first_step():
    s = build_schedule(1000, 1e-4, 0.02)
    assert s.T == 1000
    assert s.beta[0] == pytest.approx(1e-4, abs=1e-15)
    assert s.alpha[0] == pytest.approx(0.9999, abs=1e-15)
    assert s.alpha_bar[0] == pytest.approx(0.9999, abs=1e-15)
    assert s.beta[-1] == pytest.approx(0.02, abs=1e-15)


def test_two_step_hand_product():
    s = NoiseSchedule.from_betas([0.5, 0.5])
    np.testing.assert_allclose(s.alpha_bar, [0.5, 0.25], rtol=0, atol=1e-15)


@pytest.mark.parametrize(
    "args", [(3, 0.0, 0.0), (0, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 1e-4, 1.0), (2.5, 1e-4, 0.02)]
)
def test_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_tiny_beta_limit_keeps_signal():
    s = build_schedule(3, 1e-12, 1e-12)
    np.testing.assert_allclose(s.alpha_bar, 1.0, atol=1e-11)


def test_immutable():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        s.beta[0] = 0.3
    with pytest.raises(AttributeError):
        s.beta = np.ones(10)


def test_posterior_first_step_collapses_onto_x0():
    s = build_schedule(1000)
    assert posterior_coefficients(s, 1) == (1.0, 0.0, 0.0)


def test_posterior_hand_values():
    s = NoiseSchedule.from_betas([0.5, 0.5])
    c0, ct, var = posterior_coefficients(s, 2)
    assert c0 == pytest.approx(math.sqrt(0.5) * 0.5 / 0.75, abs=1e-15)
    assert ct == pytest.approx(math.sqrt(0.5) * 0.5 / 0.75, abs=1e-15)
    assert c0 == pytest.approx(0.4714, abs=5e-5)
    assert var == pytest.approx(1 / 3, abs=1e-15)


@pytest.mark.parametrize("t", [0, 11, -1])
def test_posterior_out_of_range(t):
    with pytest.raises(IndexError):
        posterior_coefficients(build_schedule(10), t)


def test_posterior_mean_at_zero_noise():
    # with eps = 0, x0 = x_t / sqrt(abar_t), and the posterior mean must be a
    # fixed multiple of x_t: mu = x_t * (coef_x0 / sqrt(abar_t) + coef_xt)
    s = build_schedule(50, 1e-3, 0.2)
    for t in range(1, 51):
        c0, ct, _ = posterior_coefficients(s, t)
        abar, abar_prev = s.alpha_bar[t - 1], s.alpha_bar_prev[t - 1]
        xt = 0.7
        x0 = xt / math.sqrt(abar)
        mu = c0 * x0 + ct * xt
        # independent route: posterior mean of x_{t-1} is sqrt(abar_{t-1}) x0 when eps = 0
        assert mu == pytest.approx(math.sqrt(abar_prev) * x0, rel=1e-12)
        assert mu == pytest.approx(xt * (c0 / math.sqrt(abar) + ct), rel=1e-12)


@given(
    T=st.integers(1, 400),
    lo=st.floats(1e-6, 0.3),
    span=st.floats(0.0, 0.6),
)
def test_invariants(T, lo, span):
    hi = min(lo + span, 0.99)
    try:
        s = build_schedule(T, lo, hi)
    except ValueError:
        # only legitimate rejection: the cumulative product underflows
        assert np.prod(1 - np.linspace(lo, hi, T)) == 0 or np.any(np.diff(np.cumprod(1 - np.linspace(lo, hi, T))) >= 0)
        return
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all((s.alpha > 0) & (s.alpha < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] > 0
    np.testing.assert_allclose(s.sqrt_alpha_bar**2 + s.sqrt_one_minus_alpha_bar**2, 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:], rtol=1e-12)
    assert np.all(s.posterior_variance >= 0)
    assert np.all(s.posterior_variance <= s.beta * (1 + 1e-12))
    if lo < hi:
        # sqrt(1 - abar) saturates at 1.0 in double precision once abar < ~1e-16
        assume(s.alpha_bar[-1] > 1e-12)
        assert np.all(np.diff(s.sqrt_one_minus_alpha_bar) > 0)


def test_composed_kernel_matches_marginal_symbolically():
    # compose x_t = sqrt(a_t) x_{t-1} + sqrt(1 - a_t) e_t step by step, tracking
    # the mean coefficient on x0 and the accumulated noise variance
    s = build_schedule(7, 0.01, 0.3)
    mean_coef, var = 1.0, 0.0
    for t in range(s.T):
        a = s.alpha[t]
        mean_coef *= math.sqrt(a)
        var = a * var + (1 - a)
        assert mean_coef == pytest.approx(s.sqrt_alpha_bar[t], rel=1e-12)
        assert var == pytest.approx(1 - s.alpha_bar[t], rel=1e-12)


def test_composed_kernel_matches_marginal_monte_carlo():
    s = build_schedule(20, 0.01, 0.3)
    rng = np.random.default_rng(7)
    n, x0 = 100_000, 0.8
    x = np.full(n, x0)
    for t in range(s.T):
        a = s.alpha[t]
        x = math.sqrt(a) * x + math.sqrt(1 - a) * rng.standard_normal(n)
    assert abs(x.mean() / (s.sqrt_alpha_bar[-1] * x0) - 1) < 0.01
    assert abs(x.var() / (1 - s.alpha_bar[-1]) - 1) < 0.01
