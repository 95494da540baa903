"""Metropolis-Hastings correction and replica-exchange swaps between lambda-sheets."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import STAGE_ACCEPT, DomainError, RngStream, Units, batch_uniforms
from .integrators import StepKernel, as_gradient, strang_stage_fractions
from .potentials import DriftProvider


@dataclass
class MhProposalRecord:
    x_from: np.ndarray
    x_to: np.ndarray
    forward_logdensity: float
    reverse_logdensity: float
    target_logdensity_from: float
    target_logdensity_to: float

    def log_ratio(self) -> float:
        return (self.target_logdensity_to - self.target_logdensity_from
                + self.reverse_logdensity - self.forward_logdensity)


def mh_acceptance_probability(rec: MhProposalRecord) -> float:
    lr = rec.log_ratio()
    if not math.isfinite(lr):
        return 0.0
    return 1.0 if lr >= 0 else math.exp(lr)


def mh_accept(rec: MhProposalRecord, stream: RngStream | float) -> tuple[bool, bool]:
    """Return ``(accepted, flagged)``; a non-finite log ratio is rejected and flagged."""
    lr = rec.log_ratio()
    if not math.isfinite(lr):
        return False, True
    u = stream.uniform() if isinstance(stream, RngStream) else float(stream)
    return bool(lr >= 0 or math.log(u) < lr), False


def gaussian_logpdf(y, mean, var: float) -> np.ndarray:
    r = np.asarray(y, dtype=float) - mean
    d = r.shape[-1]
    return -0.5 * np.sum(r * r, axis=-1) / var - 0.5 * d * math.log(2 * math.pi * var)


# ---------------------------------------------------------------- proposal densities

def _affine_map(drift, duration: float, noise_var: float, kind: str):
    """Affine-Gaussian form y = a x + c + N(0, v) of one substep with a quadratic drift."""
    if drift is None:
        kappa, center = 0.0, 0.0
    else:
        aff = drift.affine() if isinstance(drift, DriftProvider) else None
        if aff is None:
            raise DomainError("marginal proposal densities need quadratic (affine-gradient) drifts")
        kappa, center = aff
    hk = duration * kappa
    if kind == "em":
        a, nf = 1.0 - hk, 1.0
    elif kind == "heun":
        a, nf = 1.0 - hk + 0.5 * hk * hk, 1.0 - 0.5 * hk
    else:
        raise DomainError(f"unknown substep kind {kind!r}")
    return a, (1.0 - a) * np.asarray(center, dtype=float), noise_var * nf * nf


def _compose(maps):
    a, c, v = 1.0, 0.0, 0.0
    for a2, c2, v2 in maps:
        a, c, v = a2 * a, a2 * c + c2, a2 * a2 * v + v2
    return a, c, v


def marginal_transition(kernel: StepKernel, dt: float):
    """(a, c, v) with y | x ~ N(a x + c, v I) for affine-drift overdamped kernels."""
    two_d = 2.0 * kernel.units.D * dt
    if kernel.kind == "em-overdamped":
        return _affine_map(kernel.drift, dt, two_d, "em")
    if kernel.kind == "heun":
        if kernel.stiffness not in (0, 0.0):
            raise DomainError("marginal density of glued Heun needs the previous slice")
        return _affine_map(kernel.drift, dt, two_d, "heun")
    if kernel.kind == "strang-composed":
        fr = strang_stage_fractions(kernel.split)
        return _compose([
            _affine_map(kernel.horizontal, 0.5 * dt, two_d * fr[0], kernel.substep),
            _affine_map(kernel.drift, dt, two_d * fr[1], kernel.substep),
            _affine_map(kernel.horizontal, 0.5 * dt, two_d * fr[2], kernel.substep),
        ])
    raise DomainError(f"no closed-form proposal density for kernel {kernel.kind!r}")


def _strang_path_logdensities(kernel: StepKernel, x, dt: float, noises):
    """Forward and reverse log-densities of the realised three-stage Strang path."""
    if kernel.substep != "em":
        raise DomainError("path densities are available for Euler substeps only")
    fr = strang_stage_fractions(kernel.split)
    if min(fr) <= 0:
        raise DomainError("path densities need both split fractions positive")
    two_d = 2.0 * kernel.units.D * dt
    gh, gv = as_gradient(kernel.horizontal), as_gradient(kernel.drift)
    durations = (0.5 * dt, dt, 0.5 * dt)
    grads = (gh, gv, gh)
    pts = [np.asarray(x, dtype=float)]
    for i in range(3):
        z = pts[-1]
        pts.append(z - durations[i] * grads[i](z) + math.sqrt(two_d * fr[i]) * noises[i])
    fwd = sum(gaussian_logpdf(pts[i + 1], pts[i] - durations[i] * grads[i](pts[i]), two_d * fr[i])
              for i in range(3))
    rev_pts = pts[::-1]
    rev = sum(gaussian_logpdf(rev_pts[i + 1], rev_pts[i] - durations[i] * grads[i](rev_pts[i]), two_d * fr[i])
              for i in range(3))
    return pts[-1], fwd, rev


def propose(kernel: StepKernel, x, dt: float, seed: int, n: int, b: np.ndarray, mode: str = "auto"):
    """Draw proposals for a batch and return ``(y, log q(x->y), log q(y->x))``."""
    x = np.asarray(x, dtype=float)
    noises = kernel.draw(seed, n, b, x.shape[-1])
    if kernel.kind == "em-underdamped":
        raise DomainError("underdamped EM has a degenerate position kernel; MH is not defined")
    if mode == "auto":
        mode = "path" if kernel.kind == "strang-composed" else "marginal"
    if mode == "path":
        if kernel.kind == "em-overdamped":
            mode = "exact-em"
        elif kernel.kind != "strang-composed":
            raise DomainError("path densities are defined for Strang proposals only")
        else:
            return _strang_path_logdensities(kernel, x, dt, noises)
    y = kernel.apply(x, dt, noises)
    if mode == "exact-em" or (mode == "marginal" and kernel.kind == "em-overdamped"):
        g = as_gradient(kernel.drift)
        var = 2.0 * kernel.units.D * dt
        return y, gaussian_logpdf(y, x - dt * g(x), var), gaussian_logpdf(x, y - dt * g(y), var)
    if mode != "marginal":
        raise DomainError(f"unknown proposal density mode {mode!r}")
    a, c, v = marginal_transition(kernel, dt)
    return y, gaussian_logpdf(y, a * x + c, v), gaussian_logpdf(x, a * y + c, v)


@dataclass
class MhResult:
    trajectory: np.ndarray
    accepted: np.ndarray
    flagged: int

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean())

    @property
    def rejection_rate(self) -> float:
        return 1.0 - self.acceptance_rate


def mh_wrapped_trajectory(kernel: StepKernel, target: DriftProvider | Callable, x0, n_steps: int, dt: float,
                          seed: int, mode: str = "auto", record_every: int = 1, b0: int = 0) -> MhResult:
    """Run B chains (rows of ``x0``) with kernel proposals and MH correction.

    ``target`` is the energy whose Boltzmann law exp(-beta V) is made exactly
    stationary.  Chain i uses RNG sites (n, b0 + i, stage); accept uniforms use
    stage ``STAGE_ACCEPT``.  Only every ``record_every``-th state is stored.
    """
    value = target.value if hasattr(target, "value") else target
    beta = kernel.units.beta
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    b = b0 + np.arange(x.shape[0])
    e_x = value(x)
    frames = [x.copy()]
    accepted = np.zeros((n_steps, x.shape[0]), dtype=bool)
    flagged = 0
    for n in range(n_steps):
        y, fwd, rev = propose(kernel, x, dt, seed, n, b, mode)
        e_y = value(y)
        lr = -beta * (e_y - e_x) + rev - fwd
        u = batch_uniforms(seed, n, b, STAGE_ACCEPT)
        bad = ~np.isfinite(lr)
        flagged += int(bad.sum())
        acc = ~bad & ((lr >= 0) | (np.log(u) < np.where(bad, 0.0, lr)))
        x = np.where(acc[:, None], y, x)
        e_x = np.where(acc, e_y, e_x)
        accepted[n] = acc
        if (n + 1) % record_every == 0:
            frames.append(x.copy())
    return MhResult(np.stack(frames), accepted, flagged)


# ---------------------------------------------------------------- replica exchange

@dataclass(frozen=True)
class SheetSpec:
    """B + 1 sheets at lambda_b = b / B with auxiliary energy u(x, lambda)."""

    B: int
    u: Callable[[np.ndarray, float], np.ndarray]

    def __post_init__(self):
        if self.B < 1:
            raise DomainError("need at least two sheets (B >= 1)")

    @property
    def lambdas(self) -> np.ndarray:
        return np.arange(self.B + 1) / self.B


def arex_log_acceptance(x_b, x_b1, sheet: SheetSpec, b: int, units: Units = Units(),
                        lambdas: np.ndarray | None = None) -> float:
    """-beta [U(x_{b+1}; l_b) + U(x_b; l_{b+1}) - U(x_b; l_b) - U(x_{b+1}; l_{b+1})]."""
    if not 0 <= b < sheet.B:
        raise DomainError(f"pair index b must lie in [0, {sheet.B}), got {b}")
    lam = sheet.lambdas if lambdas is None else lambdas
    l0, l1 = lam[b], lam[b + 1]
    u = sheet.u
    # grouped so that equal states cancel exactly
    delta = (u(x_b1, l0) - u(x_b, l0)) + (u(x_b, l1) - u(x_b1, l1))
    return float(-units.beta * delta)


def arex_acceptance_probability(x_b, x_b1, sheet: SheetSpec, b: int, units: Units = Units(),
                                lambdas=None) -> float:
    la = arex_log_acceptance(x_b, x_b1, sheet, b, units, lambdas)
    return 1.0 if la >= 0 else math.exp(la)


def arex_swap(x_b, x_b1, sheet: SheetSpec, b: int, stream: RngStream | float, units: Units = Units(),
              lambdas=None) -> bool:
    """True if the states of sheets b and b+1 should be exchanged."""
    la = arex_log_acceptance(x_b, x_b1, sheet, b, units, lambdas)
    if la >= 0:
        return True
    u = stream.uniform() if isinstance(stream, RngStream) else float(stream)
    return math.log(u) < la
