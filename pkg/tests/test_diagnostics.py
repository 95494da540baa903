import math

import numpy as np
import pytest

from harmonic_em.core import DomainError, Schedule, Units
from harmonic_em.diagnostics import (
    CoupledScheme,
    coupled_weak_errors,
    em_ou_stationary_variance,
    glue_mismatch_scaling,
    loglog_slope,
    path_kl_estimate,
    quadrature_expectation,
    second_moment_recursion,
    simulate_paths,
    steps_for_accuracy,
    strang_noise_covariance,
    total_lipschitz,
    weak_order_fit,
)
from harmonic_em.integrators import StepKernel
from harmonic_em.potentials import make_quadratic, make_torsion_ring, perturb


def test_loglog_slope_exact_power_law():
    xs = np.array([1.0, 2.0, 4.0, 8.0])
    fit = loglog_slope(xs, 3.0 * xs**1.5)
    assert fit.slope == pytest.approx(1.5)
    assert fit.stderr == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        loglog_slope([1.0], [1.0])


@pytest.mark.parametrize("T_", [0.5, 2.0])
def test_constant_gap_kl(T_):
    u = Units(temperature=T_)
    ou = make_quadratic(1.0)
    g = perturb(ou, 0.2)
    sched = Schedule.uniform(50, 0.02)
    paths = simulate_paths(g, np.zeros((100, 1)), sched, u, seed=1)
    kl = path_kl_estimate(paths, sched.dts, ou, g, u)
    assert kl == pytest.approx(1.0 * 0.2**2 / (4 * u.D), rel=1e-12)


def test_tempered_kl_model_term_halves():
    ou = make_quadratic(1.0)
    g = perturb(ou, 0.3)
    sched = Schedule.uniform(20, 0.05)
    paths = simulate_paths(g, np.zeros((10, 1)), sched)
    cold = path_kl_estimate(paths, sched.dts, ou, g)
    hot = path_kl_estimate(paths, sched.dts, ou, g, upsilons=np.full(20, 2.0))
    assert hot == pytest.approx(cold / 2, rel=1e-12)


def test_em_ou_stationary_variance_matches_recursion():
    a = 1 - 0.1
    lim = second_moment_recursion(a, 0.0, 2 * 0.1, 0.0, 5000)
    assert em_ou_stationary_variance(1.0, 0.1) == pytest.approx(lim, rel=1e-12)
    assert em_ou_stationary_variance(1.0, 0.1) == pytest.approx(1 / (1 - 0.05))
    with pytest.raises(DomainError):
        em_ou_stationary_variance(1.0, 2.5)


def test_quadrature_expectation():
    assert quadrature_expectation(make_quadratic(2.0), lambda x: x[..., 0] ** 2) == pytest.approx(0.5, rel=1e-6)
    ring = make_torsion_ring((0.0, 0.0, 0.0))
    assert quadrature_expectation(ring, lambda x: np.cos(x[..., 0])) == pytest.approx(0.0, abs=1e-9)


def test_step_budget():
    L, T = 2.0, 1.0
    N = steps_for_accuracy(0.1, 0.0, L, T)
    assert N == math.ceil(L**2 / (2 * 0.01))
    assert steps_for_accuracy(0.1, 0.05, L, T) > N
    with pytest.raises(DomainError):
        steps_for_accuracy(0.1, 0.2, L, T)
    assert total_lipschitz(make_quadratic(3.0), 1.5) == 4.5


def test_weak_order_fit_drops_noise_points():
    dts = np.array([0.2, 0.1, 0.05, 0.025])
    errs = np.array([0.04, 0.01, 0.0025, 1e-5])
    with pytest.warns(UserWarning):
        res = weak_order_fit("x", dts, errs, np.full(4, 1e-4))
    assert res.used.tolist() == [True, True, True, False]
    assert res.slope == pytest.approx(2.0)
    with pytest.raises(DomainError):
        weak_order_fit("x", dts[:3], errs[:3], np.ones(3))


def test_coupled_em_error_matches_exact_recursion():
    # EM error on OU second moment is known in closed form; the harness must agree
    ou = make_quadratic(1.0)
    dts = (0.2, 0.1, 0.05, 0.025)
    res = coupled_weak_errors([CoupledScheme.from_kernel(StepKernel("em-overdamped", ou))], ou,
                              lambda x: x[..., 0] ** 2, dts, 1.0, [1.0], 40_000, seed=0, ref_div=8)
    errs, ses = res["em"]
    exact = 1.0  # x0 = 1 sits at the stationary second moment
    for h, e, s in zip(dts, errs, ses):
        n = int(round(1 / h))
        truth = second_moment_recursion(1 - h, 0.0, 2 * h, 1.0, n) - exact
        assert abs(e - truth) < 4 * s + 2e-3


def test_noise_covariance():
    C = strang_noise_covariance((0.3, 0.7), 0.5, 50_000, 2, seed=1)
    np.testing.assert_allclose(np.diag(C), 1.0, rtol=0.03)


def test_mismatch_scaling_shape():
    res = glue_mismatch_scaling(make_quadratic(1.0), [0.01, 0.04], n_chains=200, n_steps=20)
    assert res.rms_mismatch.shape == (2,)
    assert res.rms_mismatch[1] > res.rms_mismatch[0]
