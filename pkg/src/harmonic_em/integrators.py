"""Stepping kernels for overdamped and underdamped Langevin dynamics.

Kernels are pure functions.  The ``noise`` argument is either an array of
standard normals with the shape of ``x`` or an :class:`RngStream`, in which
case the draw for the stream's site is used.  All kernels broadcast over
leading batch axes of ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .core import (
    STAGE_LATE,
    STAGE_MAIN,
    STAGE_VERTICAL,
    DomainError,
    RngStream,
    StepError,
    Units,
    batch_normals,
    noise_scale,
    stiffness_for_step,
)
from .potentials import DriftProvider

Drift = Union[DriftProvider, Callable[[np.ndarray], np.ndarray], None]
Noise = Union[np.ndarray, RngStream]


def as_gradient(drift: Drift) -> Callable[[np.ndarray], np.ndarray]:
    """Turn a provider, a plain gradient callable or None (zero) into a callable."""
    if drift is None:
        return np.zeros_like
    if isinstance(drift, DriftProvider):
        return drift.gradient
    return drift


def _draw(noise: Noise, x: np.ndarray) -> np.ndarray:
    if isinstance(noise, RngStream):
        return noise.normal(x.shape[-1]).reshape(x.shape) if x.ndim <= 1 else _batch_draw(noise, x)
    xi = np.asarray(noise, dtype=float)
    if xi.shape != x.shape:
        raise DomainError(f"noise shape {xi.shape} does not match state shape {x.shape}")
    return xi


def _batch_draw(stream: RngStream, x: np.ndarray) -> np.ndarray:
    # leading axis of a batched state is the replica index b
    b = stream.b + np.arange(x.shape[0])
    return batch_normals(stream.master_seed, stream.n, b, stream.stage, x.shape[-1]).reshape(x.shape)


def _site(noise: Noise):
    return noise.site if isinstance(noise, RngStream) else None


def _check(arr: np.ndarray, what: str, noise: Noise) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise StepError(f"non-finite {what}", _site(noise))
    return arr


def _check_dt(dt: float) -> None:
    if not dt > 0:
        raise DomainError(f"step size must be positive, got {dt}")


def em_step(x, dt: float, drift: Drift, noise: Noise, units: Units = Units()) -> np.ndarray:
    """One Euler-Maruyama step x - grad V(x) dt + sqrt(2 D dt) xi."""
    _check_dt(dt)
    x = np.asarray(x, dtype=float)
    grad = _check(as_gradient(drift)(x), "gradient", noise)
    xi = _draw(noise, x)
    return x - dt * grad + noise_scale(units.D, dt) * xi


def harmonic_kernel_step(x, dt: float, g: Drift, noise: Noise, units: Units = Units(),
                         upsilon: float = 1.0) -> np.ndarray:
    """Sample the Gaussian kernel N(m, 2 D dt upsilon I) with m = x - D dt g(x).

    With ``g = grad V`` and D = 1 this is bit-identical to :func:`em_step`.
    """
    _check_dt(dt)
    x = np.asarray(x, dtype=float)
    gx = _check(as_gradient(g)(x), "drift proxy", noise)
    xi = _draw(noise, x)
    m = x - (units.D * dt) * gx
    return m + noise_scale(units.D, dt, upsilon) * xi


def kernel_mean(x, dt: float, g: Drift, units: Units = Units()) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x - (units.D * dt) * as_gradient(g)(x)


def kernel_log_density(y, x, dt: float, g: Drift, units: Units = Units(), upsilon: float = 1.0) -> np.ndarray:
    """log N(y; x - D dt g(x), 2 D dt upsilon I), summed over the last axis."""
    y = np.asarray(y, dtype=float)
    var = 2.0 * units.D * dt * upsilon
    r = y - kernel_mean(x, dt, g, units)
    d = y.shape[-1]
    return -0.5 * np.sum(r * r, axis=-1) / var - 0.5 * d * math.log(2 * math.pi * var)


def kernel_exponent_coefficient(dt: float, units: Units = Units()) -> float:
    """Coefficient c in exp(-c |y - m|^2) of the EM kernel: beta / (4 D dt)."""
    _check_dt(dt)
    return units.beta / (4.0 * units.D * dt)


def heun_step(x_prev, x, dt: float, drift: Drift, noise: Noise, units: Units = Units(),
              stiffness: float | str = 0.0) -> np.ndarray:
    """Stochastic Heun predictor/corrector sharing one Gaussian vector.

    The split drift is Psi(a, b) = s(b) - k (b - a) with score s = -beta grad V.
    ``stiffness=0`` gives the plain second-order scheme; ``"auto"`` uses the
    glue stiffness k(dt) = 1 / (2 D dt), which couples to ``x_prev``.
    """
    _check_dt(dt)
    x_prev = np.asarray(x_prev, dtype=float)
    x = np.asarray(x, dtype=float)
    k = stiffness_for_step(dt, units) if stiffness == "auto" else float(stiffness)
    grad = as_gradient(drift)
    beta, D = units.beta, units.D

    def psi(a, b):
        return -beta * _check(grad(b), "gradient", noise) - k * (b - a)

    xi = _draw(noise, x)
    kick = noise_scale(D, dt) * xi
    p0 = psi(x_prev, x)
    x_tilde = x + D * dt * p0 + kick
    p1 = psi(x, x_tilde)
    return x + 0.5 * D * dt * (p0 + p1) + kick


@dataclass
class UnderdampedState:
    x: np.ndarray
    v: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.x.shape != self.v.shape:
            raise DomainError("x and v must have the same shape")
        if self.gamma < 0:
            raise DomainError("friction must be nonnegative")


def underdamped_em_step(s: UnderdampedState, dt: float, drift: Drift, noise: Noise,
                        units: Units = Units()) -> UnderdampedState:
    """x' = x + v dt;  v' = v - gamma v dt - grad V(x) dt + sqrt(2 gamma D dt) xi."""
    _check_dt(dt)
    grad = _check(as_gradient(drift)(s.x), "gradient", noise)
    xi = _draw(noise, s.v)
    x_new = s.x + s.v * dt
    v_new = s.v - s.gamma * s.v * dt - grad * dt + math.sqrt(2.0 * s.gamma * units.D * dt) * xi
    return UnderdampedState(x_new, v_new, s.gamma)


def _split_check(split: Sequence[float]) -> tuple[float, float]:
    a_v, a_h = (float(a) for a in split)
    if a_v < 0 or a_h < 0 or abs(a_v + a_h - 1.0) > 1e-12:
        raise DomainError(f"split fractions must be nonnegative and sum to 1, got {split}")
    return a_v, a_h


def _substep(x, drift_dt: float, noise_var: float, grad, xi, kind: str, noise) -> np.ndarray:
    kick = math.sqrt(noise_var) * xi if noise_var > 0 else 0.0
    g0 = _check(grad(x), "gradient", noise)
    if kind == "em":
        return x - drift_dt * g0 + kick
    if kind == "heun":
        x_tilde = x - drift_dt * g0 + kick
        g1 = _check(grad(x_tilde), "gradient", noise)
        return x - 0.5 * drift_dt * (g0 + g1) + kick
    raise DomainError(f"unknown substep kind {kind!r}")


def strang_stage_fractions(split: Sequence[float]) -> tuple[float, float, float]:
    """Fractions of the step's noise budget used by the three substeps."""
    a_v, a_h = _split_check(split)
    return (0.5 * a_h, a_v, 0.5 * a_h)


def strang_step(x, dt: float, split: Sequence[float], vertical: Drift, horizontal: Drift,
                noises: Sequence[Noise], units: Units = Units(), substep: str = "em") -> np.ndarray:
    """Symmetric composition K_h(dt/2) o K_v(dt) o K_h(dt/2).

    The vertical drift acts for the full step and the horizontal drift for
    two half steps; the split fractions only divide the noise, giving
    variances 2D dt (a_h/2, a_v, a_h/2) which add up to 2D dt.
    ``substep`` selects Euler ("em") or Heun ("heun") substeps; Heun substeps
    make the composition second order in the weak sense.
    """
    _check_dt(dt)
    if len(noises) != 3:
        raise DomainError("strang_step needs three noise stages")
    fr = strang_stage_fractions(split)
    x = np.asarray(x, dtype=float)
    gv, gh = as_gradient(vertical), as_gradient(horizontal)
    two_d_dt = 2.0 * units.D * dt
    x = _substep(x, 0.5 * dt, two_d_dt * fr[0], gh, _draw(noises[0], x), substep, noises[0])
    x = _substep(x, dt, two_d_dt * fr[1], gv, _draw(noises[1], x), substep, noises[1])
    x = _substep(x, 0.5 * dt, two_d_dt * fr[2], gh, _draw(noises[2], x), substep, noises[2])
    return x


KINDS = ("em-overdamped", "em-underdamped", "heun", "strang-composed")
STRANG_STAGES = (STAGE_MAIN, STAGE_VERTICAL, STAGE_LATE)


@dataclass
class StepKernel:
    """A configured kernel that draws its own site-keyed noise.

    ``advance`` steps a batch of replicas ``x`` of shape (B, d) at schedule
    position ``n``; replica i uses RNG site (n, b0 + i, stage).
    """

    kind: str
    drift: Drift
    units: Units = field(default_factory=Units)
    gamma: float = 1.0
    split: tuple[float, float] = (0.5, 0.5)
    horizontal: Drift = None
    substep: str = "em"
    stiffness: float | str = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown kernel kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "strang-composed":
            _split_check(self.split)

    @property
    def stages(self) -> int:
        return 3 if self.kind == "strang-composed" else 1

    def stage_ids(self, offset: int = 0) -> tuple[int, ...]:
        ids = STRANG_STAGES if self.kind == "strang-composed" else (STAGE_MAIN,)
        return tuple(offset + s for s in ids)

    def draw(self, seed: int, n: int, b: np.ndarray, dim: int, stage_offset: int = 0) -> list[np.ndarray]:
        return [batch_normals(seed, n, b, s, dim) for s in self.stage_ids(stage_offset)]

    def apply(self, x, dt: float, noises: Sequence[np.ndarray], x_prev=None, v=None):
        """Apply with explicit noises; returns x, or (x, v) for underdamped."""
        if self.kind == "em-overdamped":
            return em_step(x, dt, self.drift, noises[0], self.units)
        if self.kind == "heun":
            return heun_step(x if x_prev is None else x_prev, x, dt, self.drift, noises[0], self.units,
                             self.stiffness)
        if self.kind == "em-underdamped":
            s = underdamped_em_step(UnderdampedState(x, v, self.gamma), dt, self.drift, noises[0], self.units)
            return s.x, s.v
        return strang_step(x, dt, self.split, self.drift, self.horizontal, noises, self.units, self.substep)

    def advance(self, x, dt: float, seed: int, n: int, b0: int = 0, x_prev=None, v=None,
                stage_offset: int = 0):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = b0 + np.arange(x.shape[0])
        noises = self.draw(seed, n, b, x.shape[-1], stage_offset)
        try:
            return self.apply(x, dt, noises, x_prev=x_prev, v=v)
        except StepError as err:
            raise StepError(str(err), (n, b0, stage_offset)) from None
