"""Units, step/stiffness maps, schedules, RNG streams and shared errors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .rng import site_normals, site_uniforms

# stage labels used for per-site draws
STAGE_MAIN = 0
STAGE_VERTICAL = 1
STAGE_LATE = 2
STAGE_ANCHOR = 3
STAGE_ACCEPT = 4
STAGE_SWAP = 5
STAGE_INIT = 6
STAGES_PER_GENERATION = 8


class DomainError(ValueError):
    """A parameter lies outside the domain where an operation is defined."""


class StepError(FloatingPointError):
    """A kernel produced a non-finite value; carries the lattice site."""

    def __init__(self, message: str, site: tuple[int, int, int] | None = None):
        self.site = site
        if site is not None:
            message = f"{message} at site (n={site[0]}, b={site[1]}, stage={site[2]})"
        super().__init__(message)


@dataclass(frozen=True)
class Units:
    """Friction units: gamma = 1 and D = k_B T, so beta * D = 1."""

    temperature: float = 1.0
    k_B: float = 1.0

    def __post_init__(self):
        if not (0 < self.temperature < math.inf and 0 < self.k_B < math.inf):
            raise DomainError("temperature and k_B must be positive and finite")

    @property
    def D(self) -> float:
        return self.k_B * self.temperature

    @property
    def beta(self) -> float:
        return 1.0 / self.D

    def tempered(self, upsilon: float) -> "Units":
        """Units at the effective temperature upsilon * T."""
        if upsilon <= 0:
            raise DomainError("tempering factor must be positive")
        return replace(self, temperature=self.temperature * upsilon)


def stiffness_for_step(dt: float, units: Units = Units()) -> float:
    """Harmonic stiffness k = 1 / (2 D dt) matching an EM step of size dt."""
    if not dt > 0:
        raise DomainError(f"step size must be positive, got {dt}")
    return units.beta / (2.0 * dt)


def step_for_stiffness(k: float, units: Units = Units()) -> float:
    """Inverse of :func:`stiffness_for_step`."""
    if not k > 0:
        raise DomainError(f"stiffness must be positive, got {k}")
    return units.beta / (2.0 * k)


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared by checks and diagnostics."""

    fd_rel: float = 1e-6
    fd_step: float = 1e-5
    identity_atol: float = 0.0
    noise_fusion_rel: float = 0.02
    mc_sigma: float = 3.0
    kabsch_rank_tol: float = 1e-10


TOLERANCES = Tolerances()


@dataclass
class Schedule:
    """Step sizes and per-step tempering factors (upsilon_n >= 1 is hot)."""

    dts: np.ndarray
    upsilons: np.ndarray = field(default=None)

    def __post_init__(self):
        self.dts = np.asarray(self.dts, dtype=float)
        if self.upsilons is None:
            self.upsilons = np.ones_like(self.dts)
        self.upsilons = np.asarray(self.upsilons, dtype=float)
        if self.dts.ndim != 1 or self.dts.shape != self.upsilons.shape:
            raise DomainError("dts and upsilons must be 1-D arrays of equal length")
        if np.any(self.dts <= 0):
            raise DomainError("all step sizes must be positive")
        if np.any(self.upsilons <= 0):
            raise DomainError("all tempering factors must be positive")

    @classmethod
    def uniform(cls, n_steps: int, dt: float) -> "Schedule":
        return cls(np.full(n_steps, float(dt)))

    @classmethod
    def geometric_tempering(cls, n_steps: int, dt: float, upsilon_max: float) -> "Schedule":
        """Early-hot, late-cold: upsilon decays geometrically from upsilon_max to 1."""
        if upsilon_max < 1:
            raise DomainError("upsilon_max must be >= 1")
        if n_steps == 1:
            ups = np.array([1.0])
        else:
            ups = upsilon_max ** (1.0 - np.arange(n_steps) / (n_steps - 1))
        return cls(np.full(n_steps, float(dt)), ups)

    def __len__(self) -> int:
        return len(self.dts)

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dts)])

    @property
    def horizon(self) -> float:
        return float(self.dts.sum())


@dataclass(frozen=True)
class RngStream:
    """Draws addressed by a lattice site; the same site always gives the same values."""

    master_seed: int
    n: int = 0
    b: int = 0
    stage: int = 0

    def at(self, **site) -> "RngStream":
        return replace(self, **site)

    @property
    def site(self) -> tuple[int, int, int]:
        return (self.n, self.b, self.stage)

    def normal(self, dim: int) -> np.ndarray:
        return site_normals(self.master_seed, self.n, self.b, self.stage, dim)

    def uniform(self) -> float:
        return float(site_uniforms(self.master_seed, self.n, self.b, self.stage))


def gaussian_draw(stream: RngStream, dim: int) -> np.ndarray:
    """Standard normal vector of length ``dim`` for the stream's site."""
    return stream.normal(dim)


def batch_normals(seed: int, n, b: Sequence[int] | np.ndarray, stage: int, dim: int) -> np.ndarray:
    """Normals for many replicas at one step: shape ``(len(b), dim)``."""
    return site_normals(seed, n, np.asarray(b), stage, dim)


def batch_uniforms(seed: int, n, b, stage: int) -> np.ndarray:
    return site_uniforms(seed, n, np.asarray(b), stage)


@dataclass
class ConfigurationState:
    """A replica's coordinates, optional velocities, and lattice position."""

    x: np.ndarray
    v: np.ndarray | None = None
    n: int = 0
    b: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=float)
            if self.v.shape != self.x.shape:
                raise DomainError("velocity shape must match coordinate shape")


def check_finite(arr: np.ndarray, what: str, site=None) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise StepError(f"non-finite {what}", site)
    return arr


def noise_scale(D: float, dt: float, upsilon: float = 1.0) -> float:
    """Standard deviation sqrt(2 D dt upsilon) of one EM increment."""
    return math.sqrt(2.0 * D * dt * upsilon)
