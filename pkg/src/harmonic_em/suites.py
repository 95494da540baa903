"""Diagnostic suites shared by the CLI ``diagnose`` command.

Each suite returns records ``{name, measured, band, verdict}``.
"""
from __future__ import annotations

import math

import numpy as np

from .config import Config
from .core import Schedule, Units
from .diagnostics import (
    CoupledScheme,
    coupled_weak_errors,
    em_ou_stationary_variance,
    loglog_slope,
    mh_rejection_scaling,
    path_kl_estimate,
    refinement_sweep,
    simulate_paths,
    stationary_bias_fit,
    strang_noise_covariance,
    weak_order_fit,
)
from .integrators import StepKernel
from .potentials import make_quadratic, make_torsion_ring, perturb


def record(name: str, measured: float, lo: float, hi: float) -> dict:
    ok = lo <= measured <= hi
    return {"name": name, "measured": float(measured), "band": [lo, hi], "verdict": "PASS" if ok else "FAIL"}


class SumQuadratic:
    """Energy of the summed vertical + horizontal quadratics (MH target for Strang)."""

    def __init__(self, *parts):
        self.parts = parts
        self.dim = parts[0].dim

    def value(self, x):
        return sum(p.value(x) for p in self.parts)

    def gradient(self, x):
        return sum(p.gradient(x) for p in self.parts)


SUM_OU = (make_quadratic(0.5), make_quadratic(1.0, 0.5))
WEAK_DTS = (0.2, 0.1, 0.05, 0.025)
MH_DTS = (0.025, 0.05, 0.1, 0.2, 0.4)


def noise_fusion(units: Units = Units(), dt: float = 1.0, n_samples: int = 100_000, seed: int = 0,
                 splits=((0.5, 0.5), (0.8, 0.2), (0.1, 0.9))) -> list[dict]:
    target = 2.0 * units.D * dt
    out = []
    for split in splits:
        C = strang_noise_covariance(split, dt, n_samples, 2, seed, units)
        worst = float(np.max(np.abs(np.diag(C) / target - 1.0)))
        off = float(np.max(np.abs(C[0, 1])) / target)
        out.append(record(f"noise-fusion split={split} max rel diag error", worst, 0.0, 0.02))
        out.append(record(f"noise-fusion split={split} off-diagonal / 2Ddt", off, 0.0, 0.02))
    return out


def weak_order(n_paths: int = 400_000, seed: int = 0, schemes=("em", "heun", "strang"),
               dts=WEAK_DTS) -> tuple[list[dict], dict]:
    """Weak-order slopes on OU (kappa=1, x0=1, T=1, f=x^2) and on the summed OU for Strang."""
    ou = make_quadratic(1.0)
    f = lambda x: x[..., 0] ** 2
    recs, details = [], {}
    single = [n for n in schemes if n in ("em", "heun")]
    if single:
        kernels = {"em": StepKernel("em-overdamped", ou), "heun": StepKernel("heun", ou)}
        res = coupled_weak_errors([CoupledScheme.from_kernel(kernels[n], n) for n in single], ou, f, dts, 1.0,
                                  [1.0], n_paths, seed)
        for n in single:
            fit = weak_order_fit(n, dts, *res[n])
            details[n] = fit
            target = 1.0 if n == "em" else 2.0
            band = 0.15 if n == "em" else 0.25
            recs.append(record(f"weak-order {n} slope", fit.slope, target - band, target + band))
    if "strang" in schemes:
        v, h = SUM_OU
        sch = [CoupledScheme.from_kernel(StepKernel("strang-composed", v, horizontal=h, substep=s), f"strang-{s}")
               for s in ("heun", "em")]
        res = coupled_weak_errors(sch, lambda x: v.gradient(x) + h.gradient(x), f, dts, 1.0, [1.0], n_paths,
                                  seed + 1)
        for s in ("heun", "em"):
            fit = weak_order_fit(f"strang-{s}", dts, *res[f"strang-{s}"])
            details[f"strang-{s}"] = fit
        recs.append(record("weak-order strang (heun substeps) slope", details["strang-heun"].slope, 1.75, 2.25))
        recs.append(record("weak-order strang (euler substeps) slope [first order expected]",
                           details["strang-em"].slope, 0.85, 1.15))
    return recs, details


def kl_budget(eps_bar: float = 0.0, grids=(16, 32, 64, 128), n_paths: int = 20_000, seed: int = 0,
              units: Units = Units()) -> list[dict]:
    pot = make_torsion_ring()
    recs = []
    rep = refinement_sweep(pot, eps_bar, grids, 1.0, n_paths, seed, interior=4, units=units)
    if eps_bar == 0:
        recs.append(record("kl-budget schedule-only slope vs N", rep.slope_vs_N.slope, -1.2, -0.8))
    else:
        recs.append(record("kl-budget schedule term slope vs N", loglog_slope(grids, rep.schedule_term).slope,
                           -1.2, -0.8))
    e0 = eps_bar if eps_bar > 0 else 0.2
    epss = [e0, e0 / 2, e0 / 4]
    N = grids[len(grids) // 2]
    model = []
    x0 = np.random.default_rng(seed).standard_normal((n_paths, 1))
    for i, e in enumerate(epss):
        g = perturb(pot, e, "smooth-random", seed=seed)
        sched = Schedule.uniform(N, 1.0 / N)
        paths = simulate_paths(g, x0, sched, units, seed + 50 + i)
        model.append(path_kl_estimate(paths, sched.dts, pot, g, units))
    recs.append(record("kl-budget model term slope vs eps_bar", loglog_slope(epss, model).slope, 1.8, 2.2))
    ou = make_quadratic(1.0)
    g = perturb(ou, 0.1, "constant-shift")
    sched = Schedule.uniform(100, 0.01)
    paths = simulate_paths(g, x0, sched, units, seed + 99)
    kl = path_kl_estimate(paths, sched.dts, ou, g, units)
    exact = 1.0 * 0.1**2 / (4 * units.D)
    recs.append(record("kl-budget constant gap T eps^2/(4D) relative error", abs(kl / exact - 1), 0.0, 1e-9))
    return recs


def refinement(eps0: float = 0.2, grids=(16, 32, 64, 128), n_paths: int = 20_000, seed: int = 0) -> list[dict]:
    pot = make_torsion_ring()
    rep = refinement_sweep(pot, lambda N: eps0 * math.sqrt(grids[0] / N), grids, 1.0, n_paths, seed, interior=4)
    kl = np.array(rep.empirical_kl)
    worst = float(np.max(np.diff(kl) / kl[:-1]))
    return [record("refinement KL monotone decrease (max relative increase)", worst, -1.0, 0.0),
            record("refinement KL slope vs N", rep.slope_vs_N.slope, -1.2, -0.8)]


def stationary_bias(n_chains: int = 4000, n_steps: int = 2000, seed: int = 0) -> list[dict]:
    ou = make_quadratic(1.0)
    f = lambda x: x[..., 0] ** 2
    dts = (0.05, 0.1, 0.2, 0.4)
    em = stationary_bias_fit(StepKernel("em-overdamped", ou), ou, f, dts, n_chains, n_steps, seed=seed, exact=1.0)
    recs = [record("stationary-bias EM slope", em.fit.slope if em.fit else math.nan, 0.85, 1.15)]
    for dt, est, se in zip(dts, em.estimates, em.stderrs):
        z = abs(est - em_ou_stationary_variance(1.0, dt)) / se
        recs.append(record(f"stationary-bias EM dt={dt} vs exact recursion (z)", z, 0.0, 3.0))
    mh = stationary_bias_fit(StepKernel("em-overdamped", ou), ou, f, (0.1, 0.4), n_chains, n_steps, seed=seed + 7,
                             exact=1.0, mh=True)
    for dt, est, se in zip(mh.dts, mh.estimates, mh.stderrs):
        recs.append(record(f"stationary-bias MH-wrapped EM dt={dt} (z vs D/kappa)", abs(est - 1.0) / se, 0.0, 3.0))
    return recs


def mh_acceptance(n_chains: int = 4000, n_steps: int = 400, seed: int = 0) -> tuple[list[dict], dict]:
    ou = make_quadratic(1.0)
    v, h = SUM_OU
    tgt = SumQuadratic(v, h)
    res = {
        "em": mh_rejection_scaling(StepKernel("em-overdamped", ou), ou, MH_DTS, n_chains, n_steps, seed),
        "strang-heun-marginal": mh_rejection_scaling(StepKernel("strang-composed", v, horizontal=h, substep="heun"),
                                                     tgt, MH_DTS, n_chains, n_steps, seed + 1, mode="marginal"),
        "strang-em-path": mh_rejection_scaling(StepKernel("strang-composed", v, horizontal=h), tgt, MH_DTS,
                                               n_chains, n_steps, seed + 2, mode="path"),
    }
    recs = [record("mh-acceptance EM rejection slope", res["em"].fit.slope, 0.7, 1.3),
            record("mh-acceptance Strang rejection slope", res["strang-heun-marginal"].fit.slope, 1.7, 2.3)]
    return recs, res


def run_suite(name: str, cfg: Config, seed: int) -> list[dict]:
    dg = cfg.section("diagnostics")
    units = Units(**{k: v for k, v in cfg.section("units").items()})
    if name == "noise-fusion":
        return noise_fusion(units, seed=seed)
    if name == "weak-order":
        return weak_order(dg["paths"], seed, tuple(s.strip() for s in dg["schemes"].split(",")))[0]
    grids = tuple(int(g) for g in dg["grids"].split(","))
    if name == "kl-budget":
        return kl_budget(cfg.section("potential")["eps_bar"], grids, seed=seed, units=units)
    if name == "refinement":
        return refinement(grids=grids, seed=seed)
    if name == "stationary-bias":
        return stationary_bias(dg["chains"], dg["steps"], seed)
    if name == "mh-acceptance":
        return mh_acceptance(seed=seed)[0]
    raise ValueError(name)
