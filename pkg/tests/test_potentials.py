import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import minimize_scalar

from harmonic_em.core import DomainError
from harmonic_em.potentials import (
    fd_gradient,
    make_double_well,
    make_potential,
    make_quadratic,
    make_torsion_ring,
    perturb,
    wrap_angle,
)

POTENTIALS = [
    make_quadratic(1.3, [0.5, -1.0]),
    make_double_well(1.0, 1.0),
    make_double_well(0.5, 1.5),
    make_torsion_ring(),
    make_torsion_ring((1.0, -0.3, 0.4)),
]


@pytest.mark.parametrize("pot", POTENTIALS, ids=lambda p: p.label)
def test_gradient_matches_finite_differences(pot):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(-2, 2, pot.dim)
        np.testing.assert_allclose(pot.gradient(x), fd_gradient(pot, x), rtol=1e-6, atol=1e-8)


def test_batch_shapes():
    x = np.zeros((5, 7, 2))
    q = make_quadratic(1.0, dim=2)
    assert q.value(x).shape == (5, 7)
    assert q.gradient(x).shape == (5, 7, 2)
    t = make_torsion_ring()
    assert t.value(np.zeros((4, 1))).shape == (4,)


def test_quadratic_affine_form():
    q = make_quadratic(2.0, [1.0, 2.0])
    kappa, c = q.affine()
    assert kappa == 2.0
    np.testing.assert_array_equal(c, [1.0, 2.0])
    assert make_double_well().affine() is None
    with pytest.raises(DomainError):
        make_quadratic(0.0)


def test_torsion_is_periodic():
    t = make_torsion_ring()
    x = np.linspace(-3, 3, 11)[:, None]
    np.testing.assert_allclose(t.value(x), t.value(x + 2 * math.pi), atol=1e-12)
    np.testing.assert_allclose(t.gradient(x), t.gradient(x - 2 * math.pi), atol=1e-12)


def test_torsion_stationary_points():
    t = make_torsion_ring()
    minima, maxima = t.stationary_points()
    # independent oracle: bounded minimisation around each bracketed root
    f = lambda th: float(t.value(np.array([th])))
    for m in minima:
        res = minimize_scalar(lambda th: f(th), bounds=(m - 0.3, m + 0.3), method="bounded",
                              options={"xatol": 1e-10})
        assert abs(wrap_angle(res.x - m)) < 1e-6
    np.testing.assert_allclose(np.degrees(minima), [-180.0, -61.92, 61.92], atol=0.01)
    np.testing.assert_allclose(np.degrees(maxima), [-116.65, 0.0, 116.65], atol=0.01)
    # trans is the global minimum
    vals = [f(m) for m in minima]
    assert np.argmin(vals) == 0


def test_double_well_minima_and_lipschitz():
    dw = make_double_well(1.0, 1.0)
    np.testing.assert_allclose(dw.gradient(np.array([[1.0], [-1.0], [0.0]])), 0.0)
    xs = np.linspace(-dw.radius, dw.radius, 2001)
    curv = 4 * (3 * xs**2 - 1)
    assert dw.lipschitz == pytest.approx(np.abs(curv).max(), rel=1e-6)


def test_boltzmann_occupancy_quadrature_oracle():
    # dense-grid occupancy against adaptive scipy quadrature
    dw = make_double_well(1.0, 1.0)
    w = lambda x: math.exp(-float(dw.value(np.array([x]))))
    z_right = quad(w, 0, 8)[0]
    z = quad(w, -8, 8)[0]
    assert z_right / z == pytest.approx(0.5, abs=1e-12)
    xs = np.linspace(-8, 8, 400_001)
    ws = np.exp(-dw.value(xs[:, None]))
    grid = np.trapezoid(ws * (xs > 0), xs) / np.trapezoid(ws, xs)
    assert grid == pytest.approx(0.5, abs=1e-4)


@pytest.mark.parametrize("mode", ["constant-shift", "smooth-random"])
def test_perturbation_sup_norm(mode):
    base = make_quadratic(1.0, dim=3)
    p = perturb(base, 0.3, mode, seed=4)
    x = np.random.default_rng(1).normal(scale=5.0, size=(20_000, 3))
    err = np.linalg.norm(p.gradient(x) - base.gradient(x), axis=-1)
    assert err.max() <= 0.3 + 1e-12
    np.testing.assert_array_equal(p.value(x), base.value(x))
    if mode == "constant-shift":
        np.testing.assert_allclose(err, 0.3)


def test_registry():
    assert make_potential("torsion-ring").periodic
    with pytest.raises(DomainError):
        make_potential("nope")
