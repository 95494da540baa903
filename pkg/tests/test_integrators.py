import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from harmonic_em.core import DomainError, RngStream, StepError, Units, batch_normals
from harmonic_em.integrators import (
    StepKernel,
    em_step,
    harmonic_kernel_step,
    heun_step,
    kernel_exponent_coefficient,
    kernel_log_density,
    kernel_mean,
    strang_stage_fractions,
    strang_step,
    underdamped_em_step,
    UnderdampedState,
)
from harmonic_em.potentials import make_double_well, make_quadratic, make_torsion_ring


def test_harmonic_kernel_is_em_bitwise():
    pot = make_torsion_ring()
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, (1000, 1))
    xi = rng.standard_normal(x.shape)
    a = em_step(x, 0.01, pot, xi)
    b = harmonic_kernel_step(x, 0.01, pot.gradient, xi)
    assert np.array_equal(a, b)


def test_stream_noise_equals_explicit_noise():
    q = make_quadratic(1.0, dim=3)
    s = RngStream(5, n=2, b=1)
    np.testing.assert_array_equal(em_step(np.ones(3), 0.1, q, s), em_step(np.ones(3), 0.1, q, s.normal(3)))


def test_kernel_log_density_matches_scipy():
    q = make_quadratic(2.0, [0.3, -0.2])
    u = Units(temperature=1.7)
    x = np.array([0.5, 1.0])
    y = np.array([0.1, 0.9])
    m = kernel_mean(x, 0.05, q, u)
    var = 2 * u.D * 0.05 * 1.5
    ref = multivariate_normal(m, var * np.eye(2)).logpdf(y)
    assert kernel_log_density(y, x, 0.05, q, u, upsilon=1.5) == pytest.approx(ref, rel=1e-12)


def test_exponent_coefficient_is_stiffness_over_two_d():
    # beta / (4 D dt) = k(dt) / (2 D)
    u = Units(temperature=0.5)
    assert kernel_exponent_coefficient(0.2, u) == pytest.approx(u.beta / (2 * 0.2) / (2 * u.D))


def test_heun_closed_form_on_ou():
    kappa, dt = 1.5, 0.1
    q = make_quadratic(kappa)
    x = np.array([[0.7], [-1.2]])
    xi = np.array([[0.3], [-0.4]])
    out = heun_step(x, x, dt, q, xi)
    kick = math.sqrt(2 * dt) * xi
    h = kappa * dt
    np.testing.assert_allclose(out, x * (1 - h + 0.5 * h * h) + (1 - 0.5 * h) * kick, rtol=1e-14)


def test_heun_matches_trapezoid_without_noise_term_difference():
    # with zero noise Heun is the explicit trapezoid rule for the gradient flow
    dw = make_double_well()
    x = np.array([[0.4]])
    dt = 0.01
    p = x - dt * dw.gradient(x)
    expected = x - 0.5 * dt * (dw.gradient(x) + dw.gradient(p))
    np.testing.assert_allclose(heun_step(x, x, dt, dw, np.zeros_like(x)), expected, rtol=1e-15)


def test_heun_auto_stiffness_closed_form():
    q = make_quadratic(1.0)
    dt = 0.1
    k = 1.0 / (2 * dt)
    xp, x = np.array([[0.7]]), np.array([[0.5]])
    xi = np.array([[0.2]])
    kick = math.sqrt(2 * dt) * xi
    p0 = -x - k * (x - xp)
    xt = x + dt * p0 + kick
    p1 = -xt - k * (xt - x)
    expected = x + 0.5 * dt * (p0 + p1) + kick
    np.testing.assert_allclose(heun_step(xp, x, dt, q, xi, stiffness="auto"), expected, rtol=1e-14)


def test_underdamped_free_flight_is_exact():
    s = UnderdampedState(np.array([1.0, 2.0]), np.array([0.5, -1.0]), gamma=0.0)
    flat = lambda x: np.zeros_like(x)
    out = underdamped_em_step(s, 0.25, flat, np.ones(2))
    np.testing.assert_array_equal(out.x, [1.125, 1.75])
    np.testing.assert_array_equal(out.v, [0.5, -1.0])


def test_underdamped_velocity_variance():
    s = UnderdampedState(np.zeros((100_000, 1)), np.zeros((100_000, 1)), gamma=2.0)
    xi = batch_normals(0, 0, np.arange(100_000), 0, 1)
    out = underdamped_em_step(s, 0.1, make_quadratic(1.0), xi)
    assert out.v.var() == pytest.approx(2 * 2.0 * 0.1, rel=0.02)
    np.testing.assert_array_equal(out.x, 0.0)


def test_strang_fractions():
    assert strang_stage_fractions((0.6, 0.4)) == pytest.approx((0.2, 0.6, 0.2))
    with pytest.raises(DomainError):
        strang_stage_fractions((0.6, 0.6))


def test_strang_without_noise_is_symmetric_composition():
    v, h = make_quadratic(1.0), make_quadratic(2.0, 1.0)
    x = np.array([[0.3]])
    z = [np.zeros_like(x)] * 3
    dt = 0.1
    a = x - 0.5 * dt * h.gradient(x)
    b = a - dt * v.gradient(a)
    c = b - 0.5 * dt * h.gradient(b)
    np.testing.assert_allclose(strang_step(x, dt, (0.5, 0.5), v, h, z), c, rtol=1e-15)


def test_step_error_on_non_finite_gradient():
    bad = lambda x: np.full_like(x, np.nan)
    with pytest.raises(StepError):
        em_step(np.zeros(2), 0.1, bad, np.zeros(2))
    k = StepKernel("em-overdamped", bad)
    with pytest.raises(StepError, match="n=3"):
        k.advance(np.zeros((2, 1)), 0.1, 0, 3)


def test_nonpositive_step_rejected():
    with pytest.raises(DomainError):
        em_step(np.zeros(1), 0.0, make_quadratic(1.0), np.zeros(1))


def test_step_kernel_advance_uses_site_noise():
    q = make_quadratic(1.0, dim=2)
    k = StepKernel("em-overdamped", q)
    x = np.ones((4, 2))
    out = k.advance(x, 0.1, seed=9, n=5, b0=10)
    xi = batch_normals(9, 5, 10 + np.arange(4), 0, 2)
    np.testing.assert_array_equal(out, em_step(x, 0.1, q, xi))
    s = StepKernel("strang-composed", q, horizontal=q)
    assert s.stages == 3 and len(set(s.stage_ids())) == 3
    with pytest.raises(DomainError):
        StepKernel("leapfrog", q)


def _underdamped_mean(gamma, t=0.5):
    # the mean of a linear SDE follows the noiseless recursion
    dt = 0.05 / gamma
    s = UnderdampedState(np.array([1.0]), np.array([0.0]), gamma)
    for _ in range(int(round(gamma * t / dt))):
        s = underdamped_em_step(s, dt, make_quadratic(1.0), np.zeros(1))
    return float(s.x[0])


def test_high_friction_limit_trend():
    target = math.exp(-0.5)
    errs = [abs(_underdamped_mean(g) - target) for g in (4.0, 16.0)]
    assert errs[1] < errs[0]
    assert errs[1] < 0.02


def test_em_local_moment_growth_is_linear():
    # E|X_{n+1} - X_n|^2 <= C dt for bounded drift
    ring = make_torsion_ring()
    x = np.random.default_rng(0).uniform(-3, 3, (50_000, 1))
    ratios = []
    for dt in (0.001, 0.01, 0.1):
        xi = batch_normals(1, 0, np.arange(x.shape[0]), 0, 1)
        ratios.append(float(np.mean((em_step(x, dt, ring, xi) - x) ** 2)) / dt)
    assert max(ratios) < 2.0 + ring.lipschitz**2 * 0.1
    assert min(ratios) > 1.9
