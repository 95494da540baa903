"""Acceptance gate: one test and one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v -s`` to see the lines as they are
produced; they are also collected in the terminal summary.
"""
import itertools
import math
import time

import numpy as np
import pytest

from harmonic_em.core import STAGE_ANCHOR, Schedule, Units, batch_normals, step_for_stiffness, stiffness_for_step
from harmonic_em.diagnostics import (
    em_ou_stationary_variance,
    glue_mismatch_scaling,
    long_run_average,
    path_kl_estimate,
    quadrature_expectation,
    simulate_paths,
)
from harmonic_em.exactness import SheetSpec, arex_acceptance_probability, mh_wrapped_trajectory
from harmonic_em.glue import (
    GlueSpec,
    effective_temperature,
    per_frame_force_scalars,
    radial_glue_energy,
    radial_glue_forces,
    tempered_kernel_step,
)
from harmonic_em.integrators import (
    StepKernel,
    UnderdampedState,
    em_step,
    harmonic_kernel_step,
    kernel_mean,
    underdamped_em_step,
)
from harmonic_em.lattice import HorizontalCoupling, TrajectoryLattice, run_lattice
from harmonic_em.observables import (
    batch_correlation_matrix,
    circular_acf,
    integrated_autocorrelation,
    kabsch_align,
)
from harmonic_em.potentials import make_double_well, make_quadratic, make_torsion_ring, perturb, wrap_angle
from harmonic_em import suites


def _fmt_recs(recs):
    return "; ".join(f"{r['name']}={r['measured']:.4g} in [{r['band'][0]:g}, {r['band'][1]:g}]" for r in recs)


def test_c01_em_harmonic_identity(verdict):
    t0 = time.perf_counter()
    pots = [make_torsion_ring(), make_quadratic(1.3, [0.2, -0.4, 1.0]), make_double_well()]
    rng = np.random.default_rng(0)
    pairs = mismatches = 0
    for seed in range(100):
        pot = pots[seed % 3]
        x = rng.uniform(-2, 2, (100, pot.dim))
        dt = float(rng.uniform(1e-4, 0.1))
        xi = batch_normals(seed, 0, np.arange(100), 0, pot.dim)
        a = em_step(x, dt, pot, xi)
        b = harmonic_kernel_step(x, dt, pot.gradient, xi)
        mismatches += int(np.sum(np.any(a != b, axis=-1)))
        pairs += 100
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 1.0
    verdict(1, f"EM == harmonic kernel bitwise: {pairs - mismatches}/{pairs} pairs identical, {elapsed:.2f} s", ok)
    assert ok


def test_c02_stiffness_round_trip(verdict):
    worst = 0.0
    for T in (0.3, 1.0, 2.5):
        u = Units(temperature=T)
        for dt in np.logspace(-8, 2, 1000):
            k = stiffness_for_step(dt, u)
            worst = max(worst, abs(k * 2 * u.D * dt - 1.0), abs(step_for_stiffness(k, u) / dt - 1.0))
    ok = worst < 1e-12
    verdict(2, f"k = 1/(2 D dt) and dt = beta/(2k): max relative error {worst:.2e} (< 1e-12)", ok)
    assert ok


def test_c03_ou_stationarity(verdict):
    ou = make_quadratic(1.0)
    f = lambda x: x[..., 0] ** 2
    k = StepKernel("em-overdamped", ou)
    dt, chains, steps, burn = 0.01, 2000, 500, 500
    m, se = long_run_average(k, f, dt, chains, steps, burn, seed=3)
    exact_em = em_ou_stationary_variance(1.0, dt)
    z_em = abs(m - exact_em) / se
    m2, se2 = long_run_average(k, f, dt, chains, steps, burn, seed=4, mh_target=ou)
    z_mh = abs(m2 - 1.0) / se2
    ok = z_em < 3 and z_mh < 3
    verdict(3, f"EM var {m:.5f} vs recursion {exact_em:.5f} (z={z_em:.2f}); "
               f"MH var {m2:.5f} vs D/kappa=1 (z={z_mh:.2f}); {chains * steps} samples each", ok)
    assert ok


def _torsion_populations(theta, maxima):
    lo, mid, hi = maxima
    gm = (theta > lo) & (theta < mid)
    gp = (theta > mid) & (theta < hi)
    return [~(gm | gp), gm, gp]


def test_c04_boltzmann_occupancy(verdict):
    ring = make_torsion_ring()
    _, maxima = ring.stationary_points()
    chains = 2000
    x0 = np.random.default_rng(0).uniform(-math.pi, math.pi, (chains, 1))
    res = mh_wrapped_trajectory(StepKernel("em-overdamped", ring), ring, x0, 4000, 0.1, seed=1, record_every=10)
    th = wrap_angle(res.trajectory[100:, :, 0])
    zs, parts = [], []
    for name, occ, i in zip(("trans", "gauche-", "gauche+"), _torsion_populations(th, maxima), range(3)):
        exact = quadrature_expectation(
            ring, lambda x, i=i: _torsion_populations(wrap_angle(x[..., 0]), maxima)[i].astype(float))
        per_chain = occ.mean(axis=0)
        z = abs(per_chain.mean() - exact) / (per_chain.std(ddof=1) / math.sqrt(chains))
        zs.append(z)
        parts.append(f"{name} {per_chain.mean():.4f}/{exact:.4f} z={z:.2f}")
    dw = make_double_well(1.0, 1.0)
    x0 = np.random.default_rng(1).uniform(-2, 2, (chains, 1))
    res = mh_wrapped_trajectory(StepKernel("em-overdamped", dw), dw, x0, 4000, 0.05, seed=2, record_every=10)
    right = (res.trajectory[100:, :, 0] > 0).mean(axis=0)
    exact = quadrature_expectation(dw, lambda x: (x[..., 0] > 0).astype(float))
    z = abs(right.mean() - exact) / (right.std(ddof=1) / math.sqrt(chains))
    zs.append(z)
    parts.append(f"double-well right {right.mean():.4f}/{exact:.4f} z={z:.2f}")
    ok = max(zs) < 3
    verdict(4, "MH occupancy vs quadrature: " + "; ".join(parts), ok)
    assert ok


def test_c05_noise_fusion(verdict):
    recs = suites.noise_fusion(n_samples=100_000)
    ok = all(r["verdict"] == "PASS" for r in recs)
    worst = max(r["measured"] for r in recs)
    verdict(5, f"Strang pure-noise covariance vs 2D dt I, 3 splits: worst relative deviation {worst:.4f} (< 0.02)", ok)
    assert ok


@pytest.mark.slow
def test_c06_weak_order(verdict):
    recs, details = suites.weak_order(n_paths=1_000_000, seed=0)
    gate = [r for r in recs if "euler substeps" not in r["name"]]
    ok = all(r["verdict"] == "PASS" for r in gate)
    extra = f"; strang-em {details['strang-em'].slope:.3f} (first order, informational)"
    verdict(6, "weak-order slopes: " + _fmt_recs(gate) + extra, ok)
    assert ok


@pytest.mark.slow
def test_c07_mh_acceptance(verdict):
    recs, res = suites.mh_acceptance(n_chains=4000, n_steps=400, seed=0)
    ok = all(r["verdict"] == "PASS" for r in recs)
    verdict(7, "1 - acceptance vs dt: " + _fmt_recs(recs), ok)
    assert ok


@pytest.mark.slow
def test_c08_kl_budget(verdict):
    recs = suites.kl_budget(eps_bar=0.0, n_paths=20_000, seed=0)
    ok = all(r["verdict"] == "PASS" for r in recs)
    verdict(8, "path KL: " + _fmt_recs(recs), ok)
    assert ok


def test_c09_variance_tempering(verdict):
    q = make_quadratic(1.0, dim=2)
    x = np.array([0.8, -0.3])
    dt, M = 0.05, 100_000
    m = kernel_mean(x, dt, q)
    zs = []
    for ups in (0.5, 2.0, 4.0):
        xi = batch_normals(int(ups * 10), 0, np.arange(M), 0, 2)
        y = tempered_kernel_step(np.broadcast_to(x, (M, 2)), dt, ups, q, xi)
        se = math.sqrt(2 * dt * ups / M)
        zs.append(float(np.max(np.abs(y.mean(axis=0) - m)) / se))
    temps_ok = all(effective_temperature(300.0, u) == u * 300.0 for u in (0.5, 1.0, 2.0, 4.0))
    ou = make_quadratic(1.0)
    g = perturb(ou, 0.2)
    sched = Schedule.uniform(50, 0.02)
    paths = simulate_paths(g, np.random.default_rng(0).standard_normal((20_000, 1)), sched, seed=1)
    cold = path_kl_estimate(paths, sched.dts, ou, g)
    hot = path_kl_estimate(paths, sched.dts, ou, g, upsilons=np.full(50, 2.0))
    ratio = hot / cold
    ok = max(zs) < 4 and temps_ok and abs(ratio - 0.5) < 1e-9
    verdict(9, f"tempered mean z-scores {', '.join(f'{z:.2f}' for z in zs)} (< 4); T_n = upsilon T exact: {temps_ok}; "
               f"model term ratio upsilon=2 / upsilon=1 = {ratio:.12f}", ok)
    assert ok


def test_c10_replica_exchange(verdict):
    table = np.array([[0.0, 1.0], [0.7, -0.4], [1.5, 0.2]])
    sheet = SheetSpec(1, lambda s, lam: float(table[int(s), int(round(lam))]))
    units = Units(temperature=0.8)
    states = list(itertools.product(range(3), range(3)))
    pi = np.array([math.exp(-units.beta * (table[a, 0] + table[b, 1])) for a, b in states])
    pi /= pi.sum()
    P = np.zeros((9, 9))
    for i, (a, b) in enumerate(states):
        j = states.index((b, a))
        alpha = arex_acceptance_probability(a, b, sheet, 0, units)
        P[i, j] += alpha
        P[i, i] += 1 - alpha
    flux = pi[:, None] * P
    db = float(np.abs(flux - flux.T).max())
    stat = float(np.abs(pi @ P - pi).max())
    flat = SheetSpec(1, lambda s, lam: 0.3 * s)
    sym = all(arex_acceptance_probability(a, b, flat, 0) == 1.0 for a, b in states)
    same = all(arex_acceptance_probability(a, a, sheet, 0, units) == 1.0 for a in range(3))
    ok = db < 1e-12 and stat < 1e-12 and sym and same
    verdict(10, f"swap kernel detailed balance {db:.1e}, stationarity {stat:.1e} (< 1e-12); "
                f"lambda-independent energy gives alpha=1: {sym}; equal states alpha=1: {same}", ok)
    assert ok


@pytest.mark.slow
def test_c11_time_parallel_determinism(verdict):
    ring = make_torsion_ring()
    sheet = SheetSpec(8, lambda x, lam: lam * np.sum(np.asarray(x) ** 2, axis=-1))
    hc = HorizontalCoupling(stiffness=5.0, sheet=sheet, sheet_gradient=lambda x, lam: 2 * lam * x, swaps=True)
    kern = StepKernel("em-overdamped", ring)
    results = {}
    t0 = time.perf_counter()
    for w in (1, 4, 8):
        lat = TrajectoryLattice.initialize(16, 8, 1, 0.01, seed=5)
        results[w] = run_lattice(lat, kern, hc, 100, split=(0.5, 0.5), seed=5, workers=w).states
    elapsed = time.perf_counter() - t0
    same = np.array_equal(results[1], results[4]) and np.array_equal(results[1], results[8])
    ok = same and np.all(np.isfinite(results[1]))
    verdict(11, f"lattice 17x9 after 100 macro-iterations bit-identical for workers 1/4/8: {same} ({elapsed:.1f} s)", ok)
    assert ok


def test_c12_radial_glue(verdict):
    rng = np.random.default_rng(0)
    coords = rng.normal(size=(6, 5, 3))
    sums, fd_errs = [], []
    for mode in ("per-frame", "pairwise"):
        spec = GlueSpec("radial-rmin", r_min=0.6, S=3, rho=0.6, distance_mode=mode, stiffness=0.4)
        F = radial_glue_forces(coords, spec, align=False)
        sums.append(float(np.abs(F.sum(axis=0)).max()))
        frozen = per_frame_force_scalars(coords, spec) if mode == "per-frame" else None
        h = 1e-6
        G = np.zeros_like(coords)
        for idx in np.ndindex(coords.shape):
            e = np.zeros_like(coords)
            e[idx] = h
            G[idx] = (radial_glue_energy(coords + e, spec, frozen_forces=frozen)
                      - radial_glue_energy(coords - e, spec, frozen_forces=frozen)) / (2 * h)
        fd_errs.append(float(np.linalg.norm(F + G) / np.linalg.norm(F)))
    # a stack whose consecutive RMS distances all equal r_min
    step = rng.normal(size=(5, 3))
    step -= step.mean(axis=0)
    step *= 0.6 / math.sqrt(np.sum(step**2) / 5)
    line = np.stack([coords[0] + t * step for t in range(6)])
    zero = float(np.abs(radial_glue_forces(line, GlueSpec("radial-rmin", r_min=0.6, eps=1e-12), align=False)).max())
    ok = max(sums) < 1e-12 and max(fd_errs) < 1e-5 and zero < 1e-10
    verdict(12, f"glue stack sum {max(sums):.1e}; |F| at d_t = r_min {zero:.1e}; "
                f"FD relative error per-frame {fd_errs[0]:.1e}, pairwise {fd_errs[1]:.1e} (< 1e-5)", ok)
    assert ok


def test_c13_observables(verdict):
    const = np.allclose(circular_acf(np.full(100, 0.7), 5), 1.0)
    alt = circular_acf(np.where(np.arange(100) % 2 == 0, 0.0, math.pi), 1)[1]
    phi, n = 0.9, 200_000
    rng = np.random.default_rng(1)
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / math.sqrt(1 - phi**2)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    tau, _ = integrated_autocorrelation(x)
    tau_exact = (1 + phi) / (1 - phi)
    ref = rng.normal(size=(10, 3))
    a, b, c = 0.7, -1.1, 2.3
    Rz = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    Ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    Rx = np.array([[1, 0, 0], [0, math.cos(c), -math.sin(c)], [0, math.sin(c), math.cos(c)]])
    R = Rz @ Ry @ Rx
    ref_c = ref - ref.mean(axis=0)
    kab = kabsch_align(ref, ref_c @ R.T + 4.0)
    rot_err = float(np.abs(kab.rotation - R).max())
    C = batch_correlation_matrix(rng.normal(size=(12, 30)))
    min_eig = float(np.linalg.eigvalsh(C).min())
    ok = const and abs(alt + 1) < 1e-12 and abs(tau / tau_exact - 1) < 0.15 and rot_err < 1e-9 and min_eig > -1e-10
    verdict(13, f"circular ACF constant=1: {const}, alternating lag-1 {alt:.12f}; AR(1) tau {tau:.2f} vs "
                f"{tau_exact:.0f}; Kabsch rotation error {rot_err:.1e}; corr min eigenvalue {min_eig:.1e}", ok)
    assert ok


@pytest.mark.slow
def test_c14_mismatch_scaling(verdict):
    dts = np.array([0.0025, 0.005, 0.01, 0.02, 0.04])
    res = glue_mismatch_scaling(make_torsion_ring(), dts, n_chains=4000, n_steps=200, seed=0)
    m_ok = abs(res.mismatch_fit.slope - 0.5) <= 0.1
    s_ok = abs(res.spring_fit.slope - 1.0) <= 0.15
    spring = ", ".join(f"{v:.4f}" for v in res.spring_exponent)
    ok = m_ok and s_ok
    verdict(14, f"RMS mismatch slope {res.mismatch_fit.slope:.3f} (0.5 +/- 0.1: {m_ok}); spring exponent slope "
                f"{res.spring_fit.slope:.3f} (1.0 +/- 0.15: {s_ok}; values {spring})", ok)
    assert ok


def test_c15_underdamped(verdict):
    M, dt, gamma = 100_000, 0.05, 1.7
    units = Units(temperature=1.3)
    xi = batch_normals(7, 0, np.arange(M), 0, 1)
    s = UnderdampedState(np.zeros((M, 1)), np.zeros((M, 1)), gamma)
    out = underdamped_em_step(s, dt, make_quadratic(1.0), xi, units)
    target = 2 * gamma * units.D * dt
    rel = abs(float(out.v.var()) / target - 1)
    free = underdamped_em_step(UnderdampedState(np.array([0.5, -1.0]), np.array([2.0, 0.25]), 0.0), 0.1,
                               lambda x: np.zeros_like(x), batch_normals(0, 0, [0], STAGE_ANCHOR, 2)[0], units)
    exact = np.array_equal(free.x, np.array([0.5, -1.0]) + 0.1 * np.array([2.0, 0.25])) and \
        np.array_equal(free.v, [2.0, 0.25])
    ok = rel < 0.02 and exact
    verdict(15, f"velocity variance relative error {rel:.4f} (< 0.02); free flight exact: {exact}", ok)
    assert ok
