"""Empirical checks of the error theory: path KL, weak order, stationary bias, step budgets.

Bulk Monte Carlo here (many independent paths, no lattice semantics) uses
``numpy.random.default_rng``; the kernels under test are the library ones.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import DomainError, Schedule, Units, stiffness_for_step
from .glue import adjacent_glue_step
from .integrators import StepKernel, as_gradient, em_step, heun_step, strang_stage_fractions, strang_step
from .potentials import DriftProvider, perturb


# ---------------------------------------------------------------- fitting helpers

@dataclass
class SlopeFit:
    slope: float
    stderr: float
    intercept: float

    def within(self, target: float, band: float) -> bool:
        return abs(self.slope - target) <= band


def loglog_slope(xs, ys) -> SlopeFit:
    """Least-squares slope of log|y| against log x, with its standard error."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.abs(np.asarray(ys, dtype=float)))
    if lx.size < 2:
        raise DomainError("need at least two points for a slope")
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    if lx.size > 2:
        resid = ly - A @ coef
        s2 = float(resid @ resid) / (lx.size - 2)
        se = math.sqrt(s2 / float(np.sum((lx - lx.mean()) ** 2)))
    else:
        se = 0.0
    return SlopeFit(float(coef[0]), se, float(coef[1]))


# ---------------------------------------------------------------- path KL

def _per_step(drift, n):
    if isinstance(drift, (list, tuple)):
        return as_gradient(drift[n])
    return as_gradient(drift)


def path_kl_estimate(paths, dts, true_drift: DriftProvider, used_drift, units: Units = Units(),
                     upsilons=None, interior: int = 0, seed: int = 0) -> float:
    """Girsanov estimate (1/4) sum_n E int |grad V(X_t) - g_n(x_n)|^2 / D_n dt.

    ``paths`` has shape (N + 1, M, d) holding the grid states; ``used_drift``
    is one drift proxy or a list with one per step; D_n = upsilon_n D.  With
    ``interior = 0`` the integrand is frozen at the left grid point.  With
    ``interior = s > 0`` each step's integral is estimated from s uniform
    times u, drawing X_{t_n + u} from the frozen-drift Brownian bridge-free
    interpolant x_n - g_n(x_n) u + sqrt(2 D_n u) z.
    """
    paths = np.asarray(paths, dtype=float)
    dts = np.broadcast_to(np.asarray(dts, dtype=float), (paths.shape[0] - 1,))
    ups = np.ones_like(dts) if upsilons is None else np.asarray(upsilons, dtype=float)
    gv = as_gradient(true_drift)
    rng = np.random.default_rng(seed)
    total = 0.0
    for n, dt in enumerate(dts):
        x = paths[n]
        Dn = units.D * ups[n]
        g = _per_step(used_drift, n)(x)
        if interior == 0:
            gap = gv(x) - g
            total += dt * float(np.mean(np.sum(gap * gap, axis=-1))) / (4.0 * Dn)
            continue
        acc = 0.0
        for _ in range(interior):
            u = rng.uniform(0.0, dt, size=x.shape[:-1])[..., None]
            xt = x - g * u + np.sqrt(2.0 * Dn * u) * rng.standard_normal(x.shape)
            gap = gv(xt) - g
            acc += float(np.mean(np.sum(gap * gap, axis=-1)))
        total += dt * acc / interior / (4.0 * Dn)
    return total


def simulate_paths(drift, x0, schedule: Schedule, units: Units = Units(), seed: int = 0) -> np.ndarray:
    """EM paths under ``drift`` (shape (N + 1, M, d)), tempered by the schedule's upsilons."""
    rng = np.random.default_rng(seed)
    g = as_gradient(drift)
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    out = [x.copy()]
    for dt, ups in zip(schedule.dts, schedule.upsilons):
        x = x - dt * g(x) + math.sqrt(2.0 * units.D * dt * ups) * rng.standard_normal(x.shape)
        out.append(x.copy())
    return np.stack(out)


@dataclass
class KlBudgetReport:
    grid: list
    eps_bar: list
    model_term: list
    schedule_term: list
    empirical_kl: list
    slope_vs_N: SlopeFit | None = None

    def rows(self):
        return list(zip(self.grid, self.eps_bar, self.model_term, self.schedule_term, self.empirical_kl))


def refinement_sweep(potential: DriftProvider, eps_schedule: Callable[[int], float] | float,
                     grids: Sequence[int], T: float = 1.0, n_paths: int = 20000, seed: int = 0,
                     interior: int = 4, units: Units = Units(), mode: str = "constant-shift",
                     x0: np.ndarray | None = None) -> KlBudgetReport:
    """Path-KL table against N on uniform grids.

    For each N the drift error is eps_schedule(N).  Reported per row:
    model term (left-point gap), schedule term (KL of the exact-drift EM
    chain, interior quadrature) and the empirical KL of the perturbed chain.
    """
    eps_fn = eps_schedule if callable(eps_schedule) else (lambda N, e=float(eps_schedule): e)
    rng = np.random.default_rng(seed)
    if x0 is None:
        x0 = rng.standard_normal((n_paths, potential.dim))
    rep = KlBudgetReport([], [], [], [], [])
    for i, N in enumerate(grids):
        eps = eps_fn(N)
        g = perturb(potential, eps, mode, seed=seed) if eps > 0 else potential
        sched = Schedule.uniform(N, T / N)
        paths = simulate_paths(g, x0, sched, units, seed + 1000 + i)
        rep.grid.append(N)
        rep.eps_bar.append(eps)
        rep.model_term.append(path_kl_estimate(paths, sched.dts, potential, g, units, interior=0)
                              - path_kl_estimate(paths, sched.dts, potential, potential, units, interior=0))
        clean = paths if eps == 0 else simulate_paths(potential, x0, sched, units, seed + 1000 + i)
        rep.schedule_term.append(path_kl_estimate(clean, sched.dts, potential, potential, units, interior=interior, seed=seed + i))
        rep.empirical_kl.append(path_kl_estimate(paths, sched.dts, potential, g, units, interior=interior, seed=seed + i))
    rep.slope_vs_N = loglog_slope(rep.grid, rep.empirical_kl)
    return rep


def steps_for_accuracy(eps: float, eps_bar: float, L_tot: float, T: float, units: Units = Units()) -> int:
    """Smallest N with N >= beta L_tot^2 T^2 / (2 (eps^2 - beta T eps_bar^2))."""
    floor = units.beta * T * eps_bar**2
    if not eps**2 > floor:
        raise DomainError(f"target eps^2 = {eps**2:g} does not exceed the model-error floor beta T eps_bar^2 = {floor:g}")
    return int(math.ceil(units.beta * L_tot**2 * T**2 / (2.0 * (eps**2 - floor))))


def total_lipschitz(potential: DriftProvider, k_star: float = 0.0) -> float:
    """L_tot = L + k*: gradient Lipschitz constant plus the configured spring."""
    return potential.lipschitz + k_star


# ---------------------------------------------------------------- weak order

@dataclass
class CoupledScheme:
    """A coarse scheme driven by Brownian increments split into stages.

    ``fractions`` are the stage shares of each step; ``step(x, h, xis)``
    receives one standard normal array per stage.
    """

    name: str
    fractions: tuple[float, ...]
    step: Callable

    @classmethod
    def from_kernel(cls, kernel: StepKernel, name: str | None = None) -> "CoupledScheme":
        units = kernel.units
        if kernel.kind == "em-overdamped":
            return cls(name or "em", (1.0,), lambda x, h, xi: em_step(x, h, kernel.drift, xi[0], units))
        if kernel.kind == "heun":
            return cls(name or "heun", (1.0,),
                       lambda x, h, xi: heun_step(x, x, h, kernel.drift, xi[0], units, kernel.stiffness))
        if kernel.kind == "strang-composed":
            return cls(name or f"strang-{kernel.substep}", strang_stage_fractions(kernel.split),
                       lambda x, h, xi: strang_step(x, h, kernel.split, kernel.drift, kernel.horizontal, xi,
                                                    units, kernel.substep))
        raise DomainError(f"no coupled scheme for kernel kind {kernel.kind!r}")


@dataclass
class WeakOrderResult:
    name: str
    dts: np.ndarray
    errors: np.ndarray
    stderrs: np.ndarray
    used: np.ndarray
    fit: SlopeFit | None

    @property
    def slope(self) -> float:
        return self.fit.slope if self.fit else math.nan


def coupled_weak_errors(schemes: Sequence[CoupledScheme], sde_drift, observable, dts, T: float, x0,
                        n_paths: int, seed: int = 0, ref_div: int = 64, units: Units = Units(),
                        chunk: int = 250_000) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Weak errors E f(X^h_T) - E f(X_T) for each scheme and step, with standard errors.

    All schemes share Brownian paths with a fine EM reference at
    dt_ref = min(dts) / ref_div; the reference is Richardson-extrapolated
    (2 f(X_dt_ref) - f(X_2dt_ref)) to remove its own first-order bias.
    """
    dts = np.asarray(dts, dtype=float)
    dt_ref = dts.min() / ref_div
    n_fine = int(round(T / dt_ref))
    if abs(n_fine * dt_ref - T) > 1e-9 * T or n_fine % 2:
        raise DomainError("horizon must be an even multiple of the reference step")
    grad = as_gradient(sde_drift)
    # fine steps per coarse step and per stage
    layout = {}
    for s in schemes:
        for h in dts:
            per = int(round(h / dt_ref))
            bounds = np.cumsum([0.0] + list(s.fractions)) * per
            if abs(per * dt_ref - h) > 1e-9 * h or np.any(np.abs(bounds - np.round(bounds)) > 1e-9):
                raise DomainError(f"step {h} of {s.name} is not aligned with the reference grid")
            layout[(s.name, h)] = (per, np.round(bounds).astype(int))
    sig = math.sqrt(2.0 * units.D)
    rng = np.random.default_rng(seed)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.shape[-1]
    sums = {(s.name, h): [0.0, 0.0] for s in schemes for h in dts}
    done = 0
    while done < n_paths:
        M = min(chunk, n_paths - done)
        xr = np.broadcast_to(x0, (M, d)).copy()
        xr2 = xr.copy()
        pend = np.zeros_like(xr)
        by_name = {s.name: s for s in schemes}
        states = {key: xr.copy() for key in layout}
        accum = {key: np.zeros((len(b) - 1, M, d)) for key, (_, b) in layout.items()}
        stage_of = {key: np.searchsorted(b, np.arange(per), side="right") - 1 for key, (per, b) in layout.items()}
        for j in range(n_fine):
            dW = math.sqrt(dt_ref) * rng.standard_normal((M, d))
            xr = xr - dt_ref * grad(xr) + sig * dW
            if j % 2 == 0:
                pend = dW
            else:
                xr2 = xr2 - 2 * dt_ref * grad(xr2) + sig * (pend + dW)
            for key, (per, bounds) in layout.items():
                pos = j % per
                accum[key][stage_of[key][pos]] += dW
                if pos + 1 == per:
                    widths = np.diff(bounds) * dt_ref
                    xis = [a / math.sqrt(w) if w > 0 else np.zeros_like(a) for a, w in zip(accum[key], widths)]
                    states[key] = by_name[key[0]].step(states[key], key[1], xis)
                    accum[key][:] = 0.0
        f_ref = 2.0 * observable(xr) - observable(xr2)
        for key, xs in states.items():
            diff = observable(xs) - f_ref
            sums[key][0] += float(diff.sum())
            sums[key][1] += float((diff * diff).sum())
        done += M
    out = {}
    for s in schemes:
        errs, ses = [], []
        for h in dts:
            s1, s2 = sums[(s.name, h)]
            mean = s1 / n_paths
            var = max(s2 / n_paths - mean * mean, 0.0)
            errs.append(mean)
            ses.append(math.sqrt(var / n_paths))
        out[s.name] = (np.array(errs), np.array(ses))
    return out


def weak_order_fit(name: str, dts, errors, stderrs, noise_sigma: float = 2.0) -> WeakOrderResult:
    """Slope of log|error| vs log dt; points within ``noise_sigma`` standard errors of 0 are dropped."""
    dts, errors, stderrs = (np.asarray(a, dtype=float) for a in (dts, errors, stderrs))
    if dts.size < 4 or dts.max() / dts.min() < 8 - 1e-9:
        raise DomainError("weak-order fits need >= 4 step sizes spanning >= 8x")
    used = np.abs(errors) > noise_sigma * stderrs
    if not used.all():
        warnings.warn(f"{name}: excluded {int((~used).sum())} step size(s) below the Monte Carlo noise floor")
    fit = loglog_slope(dts[used], errors[used]) if used.sum() >= 2 else None
    return WeakOrderResult(name, dts, errors, stderrs, used, fit)


def second_moment_recursion(a: float, c: float, v: float, x0: float, n: int) -> float:
    """E[X_n^2] for the scalar affine-Gaussian chain X' = a X + c + N(0, v)."""
    m, s = x0, 0.0
    for _ in range(n):
        m, s = a * m + c, a * a * s + v
    return m * m + s


# ---------------------------------------------------------------- stationary bias

@dataclass
class StationaryBiasResult:
    dts: np.ndarray
    estimates: np.ndarray
    stderrs: np.ndarray
    exact: float
    fit: SlopeFit | None

    @property
    def bias(self) -> np.ndarray:
        return self.estimates - self.exact


def quadrature_expectation(potential: DriftProvider, observable, units: Units = Units(),
                           lo: float = -8.0, hi: float = 8.0, n: int = 200_001) -> float:
    """E[F] under exp(-beta V) for a one-dimensional potential (dense trapezoid rule)."""
    if potential.periodic:
        lo, hi = -math.pi, math.pi
    x = np.linspace(lo, hi, n)[:, None]
    logw = -units.beta * potential.value(x)
    w = np.exp(logw - logw.max())
    f = observable(x)
    return float(np.trapezoid(w * f, x[:, 0]) / np.trapezoid(w, x[:, 0]))


def long_run_average(kernel, observable, dt: float, n_chains: int, n_steps: int, burn: int, seed: int,
                     x0=None, mh_target=None) -> tuple[float, float]:
    """Time-and-ensemble average of F with a between-chain standard error."""
    from .exactness import propose
    from .core import STAGE_ACCEPT, batch_uniforms

    rng = np.random.default_rng(seed)
    dim = kernel.drift.dim if isinstance(kernel.drift, DriftProvider) else 1
    x = rng.standard_normal((n_chains, dim)) if x0 is None else np.array(x0, dtype=float)
    b = np.arange(n_chains)
    acc = np.zeros(n_chains)
    x_prev = x
    e_x = mh_target.value(x) if mh_target is not None else None
    for n in range(burn + n_steps):
        if mh_target is None:
            x_new = kernel.advance(x, dt, seed, n, x_prev=x_prev)
        else:
            y, fwd, rev = propose(kernel, x, dt, seed, n, b)
            e_y = mh_target.value(y)
            lr = -kernel.units.beta * (e_y - e_x) + rev - fwd
            ok = (lr >= 0) | (np.log(batch_uniforms(seed, n, b, STAGE_ACCEPT)) < lr)
            x_new = np.where(ok[:, None], y, x)
            e_x = np.where(ok, e_y, e_x)
        x_prev, x = x, x_new
        if n >= burn:
            acc += observable(x)
    per_chain = acc / n_steps
    return float(per_chain.mean()), float(per_chain.std(ddof=1) / math.sqrt(n_chains))


def stationary_bias_fit(kernel, potential: DriftProvider, observable, dts, n_chains: int = 10_000,
                        n_steps: int = 2000, burn: int = 500, seed: int = 0, exact: float | None = None,
                        mh: bool = False) -> StationaryBiasResult:
    """Long-run bias |E_dt[F] - E[F]| against dt and its log-log slope."""
    if exact is None:
        exact = quadrature_expectation(potential, observable, kernel.units)
    ests, ses = [], []
    for i, dt in enumerate(dts):
        burn_i = max(burn, int(math.ceil(5.0 / dt)))
        m, s = long_run_average(kernel, observable, float(dt), n_chains, n_steps, burn_i, seed + i,
                                mh_target=potential if mh else None)
        ests.append(m)
        ses.append(s)
    ests, ses = np.array(ests), np.array(ses)
    bias = ests - exact
    used = np.abs(bias) > 2 * ses
    fit = loglog_slope(np.asarray(dts)[used], bias[used]) if used.sum() >= 2 else None
    return StationaryBiasResult(np.asarray(dts, dtype=float), ests, ses, exact, fit)


def em_ou_stationary_variance(kappa: float, dt: float, units: Units = Units()) -> float:
    """Exact stationary variance of EM on V = kappa x^2 / 2: D / (kappa (1 - kappa dt / 2))."""
    a = 1.0 - kappa * dt
    if abs(a) >= 1:
        raise DomainError("EM on this quadratic is unstable for the given dt")
    return 2.0 * units.D * dt / (1.0 - a * a)


# ---------------------------------------------------------------- glue mismatch

@dataclass
class MismatchScaling:
    dts: np.ndarray
    rms_mismatch: np.ndarray
    spring_exponent: np.ndarray
    mismatch_fit: SlopeFit
    spring_fit: SlopeFit


def glue_mismatch_scaling(potential: DriftProvider, dts, n_chains: int = 2000, n_steps: int = 200,
                          seed: int = 0, units: Units = Units()) -> MismatchScaling:
    """Run adjacent glue and measure the EM mismatch and its spring energy vs dt.

    The mismatch is x_{n+1} - x_n + dt g(x_n); the spring contribution to the
    kernel exponent is beta k(dt) / 2 |mismatch|^2, averaged over steps and chains.
    """
    rng = np.random.default_rng(seed)
    rms, spring = [], []
    for dt in dts:
        k = stiffness_for_step(float(dt), units)
        x = rng.standard_normal((n_chains, potential.dim))
        x_prev = x
        sq = 0.0
        for _ in range(n_steps):
            xi = rng.standard_normal(x.shape)
            x_new = adjacent_glue_step(x_prev, x, float(dt), potential, xi, units)
            mis = x_new - x + dt * potential.gradient(x)
            sq += float(np.mean(np.sum(mis * mis, axis=-1)))
            x_prev, x = x, x_new
        msq = sq / n_steps
        rms.append(math.sqrt(msq))
        spring.append(units.beta * 0.5 * k * msq)
    rms, spring = np.array(rms), np.array(spring)
    dts = np.asarray(dts, dtype=float)
    return MismatchScaling(dts, rms, spring, loglog_slope(dts, rms), loglog_slope(dts, spring))


# ---------------------------------------------------------------- MH and noise fusion

@dataclass
class RejectionScaling:
    dts: np.ndarray
    rejection: np.ndarray
    fit: SlopeFit


def mh_rejection_scaling(kernel: StepKernel, target, dts, n_chains: int = 4000, n_steps: int = 400,
                         seed: int = 0, mode: str = "auto", x0_scale: float = 1.0) -> RejectionScaling:
    """Rejection rate of the MH-wrapped kernel against dt, with its log-log slope."""
    from .exactness import mh_wrapped_trajectory

    rng = np.random.default_rng(seed)
    dim = getattr(target, "dim", 1)
    rates = []
    for i, dt in enumerate(dts):
        x0 = x0_scale * rng.standard_normal((n_chains, dim))
        res = mh_wrapped_trajectory(kernel, target, x0, n_steps, float(dt), seed + i, mode=mode, record_every=n_steps)
        rates.append(res.rejection_rate)
    rates = np.array(rates)
    dts = np.asarray(dts, dtype=float)
    return RejectionScaling(dts, rates, loglog_slope(dts, rates))


def strang_noise_covariance(split, dt: float = 1.0, n_samples: int = 100_000, dim: int = 2, seed: int = 0,
                            units: Units = Units()) -> np.ndarray:
    """Empirical covariance of one zero-drift Strang step from the origin (site-keyed noise)."""
    from .core import batch_normals
    from .integrators import STRANG_STAGES

    b = np.arange(n_samples)
    noises = [batch_normals(seed, 0, b, s, dim) for s in STRANG_STAGES]
    y = strang_step(np.zeros((n_samples, dim)), dt, split, None, None, noises, units)
    return np.cov(y, rowvar=False)
