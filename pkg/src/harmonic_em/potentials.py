"""Analytic potentials used as stand-ins for a learned energy.

Every provider works on arrays of shape ``(..., dim)`` and returns energies
of shape ``(...)`` and gradients of the input shape.  Lipschitz constants of
the gradient are stored so error budgets can be evaluated as numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DomainError


class DriftProvider:
    """Base class: an energy V and its gradient."""

    label: str = "drift"
    dim: int = 1
    lipschitz: float = math.inf
    periodic: bool = False

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def affine(self) -> tuple[float, np.ndarray] | None:
        """``(kappa, center)`` if the gradient is kappa * (x - center), else None."""
        return None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.gradient(x)


@dataclass(frozen=True, eq=False)
class Quadratic(DriftProvider):
    kappa: float
    center: np.ndarray
    label: str = "quadratic"

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def lipschitz(self) -> float:
        return self.kappa

    def value(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return 0.5 * self.kappa * np.sum(d * d, axis=-1)

    def gradient(self, x):
        return self.kappa * (np.asarray(x, dtype=float) - self.center)

    def affine(self):
        return self.kappa, self.center


def make_quadratic(kappa: float, center=0.0, dim: int | None = None) -> Quadratic:
    """V(x) = kappa * |x - c|^2 / 2."""
    if not kappa > 0:
        raise DomainError(f"kappa must be positive, got {kappa}")
    c = np.atleast_1d(np.asarray(center, dtype=float))
    if dim is not None:
        c = np.broadcast_to(c, (dim,)).copy()
    return Quadratic(float(kappa), c)


@dataclass(frozen=True, eq=False)
class DoubleWell(DriftProvider):
    a: float
    b: float
    radius: float
    label: str = "double-well"
    dim: int = 1

    @property
    def lipschitz(self) -> float:
        # sup |V''| over |x| <= radius; V'' = 4a(3x^2 - b^2)
        return 4 * self.a * max(self.b**2, 3 * self.radius**2 - self.b**2)

    def value(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        return self.a * (x * x - self.b**2) ** 2

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return 4 * self.a * x * (x * x - self.b**2)


def make_double_well(a: float = 1.0, b: float = 1.0, radius: float | None = None) -> DoubleWell:
    """V(x) = a (x^2 - b^2)^2 in one dimension.

    The gradient is not globally Lipschitz; ``radius`` sets the region
    |x| <= radius (default 2b) over which the stored constant holds.
    """
    if not (a > 0 and b > 0):
        raise DomainError("double-well parameters a, b must be positive")
    return DoubleWell(float(a), float(b), float(radius if radius is not None else 2 * b))


# phases put the minima near -60, 60 and 180 degrees (gauche-, gauche+, trans)
TORSION_PHASES = (0.0, math.pi, 0.0)
TORSION_DEFAULT_HEIGHTS = (0.7, 0.1, 1.5)


@dataclass(frozen=True, eq=False)
class TorsionRing(DriftProvider):
    heights: tuple[float, float, float]
    phases: tuple[float, float, float] = TORSION_PHASES
    label: str = "torsion-ring"
    dim: int = 1
    periodic: bool = True

    @property
    def lipschitz(self) -> float:
        return float(sum((j + 1) ** 2 * abs(h) for j, h in enumerate(self.heights)))

    def value(self, x):
        th = np.asarray(x, dtype=float)[..., 0]
        return sum(h * np.cos((j + 1) * th + p) for j, (h, p) in enumerate(zip(self.heights, self.phases)))

    def gradient(self, x):
        th = np.asarray(x, dtype=float)
        return -sum((j + 1) * h * np.sin((j + 1) * th + p) for j, (h, p) in enumerate(zip(self.heights, self.phases)))

    def stationary_points(self, n_grid: int = 3600) -> tuple[np.ndarray, np.ndarray]:
        """Minima and maxima on [-pi, pi), located by bracketing sign changes."""
        from scipy.optimize import brentq

        def g(t):
            return float(self.gradient(np.array([t]))[0])

        # offset grid so no stationary point sits exactly on a node
        shift = 0.5 * math.pi / n_grid
        grid = np.linspace(-math.pi + shift, math.pi + shift, n_grid + 1)
        vals = self.gradient(grid[:, None])[:, 0]
        minima, maxima = [], []
        for lo, hi, glo, ghi in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
            if glo == 0.0:
                root = lo
            elif glo * ghi < 0:
                root = brentq(g, lo, hi, xtol=1e-14)
            else:
                continue
            (minima if glo < 0 or ghi > 0 else maxima).append(float(wrap_angle(root)))
        return np.sort(minima), np.sort(maxima)


def make_torsion_ring(heights=TORSION_DEFAULT_HEIGHTS) -> TorsionRing:
    """V(theta) = sum_j h_j cos(j theta + phi_j), j = 1..3."""
    h = tuple(float(v) for v in heights)
    if len(h) != 3 or not all(math.isfinite(v) for v in h):
        raise DomainError("torsion ring needs three finite heights")
    return TorsionRing(h)


def wrap_angle(theta: np.ndarray) -> np.ndarray:
    """Map angles to [-pi, pi)."""
    return (np.asarray(theta) + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True, eq=False)
class PerturbedDrift(DriftProvider):
    """Gradient ``base.gradient(x) + epsilon(x)``; the energy stays the base energy."""

    base: DriftProvider
    eps_bar: float
    epsilon: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    label: str = "perturbed"

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def lipschitz(self) -> float:
        return self.base.lipschitz

    @property
    def periodic(self) -> bool:
        return self.base.periodic

    def value(self, x):
        return self.base.value(x)

    def gradient(self, x):
        return self.base.gradient(x) + self.epsilon(np.asarray(x, dtype=float))


def perturb(base: DriftProvider, eps_bar: float, mode: str = "constant-shift", seed: int = 0,
            n_modes: int = 8) -> PerturbedDrift:
    """Add a drift error with sup-norm at most ``eps_bar``.

    ``constant-shift`` adds ``eps_bar`` along the first axis everywhere.
    ``smooth-random`` adds a sum of random Fourier modes whose amplitudes are
    normalised so the bound holds pointwise.
    """
    if eps_bar < 0:
        raise DomainError("eps_bar must be nonnegative")
    d = base.dim
    if mode == "constant-shift":
        shift = np.zeros(d)
        shift[0] = eps_bar

        def eps(x):
            return np.broadcast_to(shift, x.shape).copy()
    elif mode == "smooth-random":
        rng = np.random.default_rng(seed)
        freqs = rng.normal(size=(n_modes, d))
        phases = rng.uniform(0, 2 * np.pi, n_modes)
        amps = rng.uniform(0.5, 1.0, n_modes)
        dirs = rng.normal(size=(n_modes, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        weights = eps_bar * amps / amps.sum()

        def eps(x):
            s = np.sin(x @ freqs.T + phases)
            return (s * weights) @ dirs
    else:
        raise DomainError(f"unknown perturbation mode {mode!r}")
    return PerturbedDrift(base, float(eps_bar), eps, label=f"{base.label}+{mode}")


def fd_gradient(provider: DriftProvider, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``provider.value`` at a single point."""
    x = np.asarray(x, dtype=float)
    scale = max(1.0, float(np.max(np.abs(x))))
    step = h * scale
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (provider.value(x + e) - provider.value(x - e)) / (2 * step)
    return g


REGISTRY: dict[str, Callable[..., DriftProvider]] = {
    "quadratic": make_quadratic,
    "double-well": make_double_well,
    "torsion-ring": make_torsion_ring,
}


def make_potential(label: str, **params) -> DriftProvider:
    try:
        ctor = REGISTRY[label]
    except KeyError:
        raise DomainError(f"unknown potential {label!r}; choose from {sorted(REGISTRY)}") from None
    return ctor(**params)
