"""Harmonic couplings between trajectory slices.

Includes adjacent and anchored glue steps, the glued score, variance
tempering, and the radial temporal adapter acting on a stack of frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DomainError, Units, noise_scale, stiffness_for_step
from .integrators import Drift, Noise, _check, _check_dt, _draw, as_gradient, harmonic_kernel_step
from .observables import center_frames, kabsch_align

GLUE_KINDS = ("adjacent", "anchored", "radial-rmin")
DISTANCE_MODES = ("per-frame", "pairwise")
RADIAL_DEFAULT_K = 0.1


@dataclass(frozen=True)
class GlueSpec:
    kind: str = "adjacent"
    stiffness: float | None = None
    k_a: float = 1.0
    r_min: float = 1.0
    S: int = 1
    rho: float = 0.6
    eps: float = 1e-9
    distance_mode: str = "per-frame"

    def __post_init__(self):
        if self.kind not in GLUE_KINDS:
            raise DomainError(f"unknown glue kind {self.kind!r}")
        if self.kind == "anchored" and not self.k_a > 0:
            raise DomainError("anchored glue needs k_a > 0")
        if self.kind == "radial-rmin":
            if not (self.r_min > 0 and self.eps > 0):
                raise DomainError("radial glue needs r_min > 0 and eps > 0")
            if self.S < 1 or not 0 < self.rho < 1:
                raise DomainError("radial glue needs S >= 1 and 0 < rho < 1")
            if self.distance_mode not in DISTANCE_MODES:
                raise DomainError(f"unknown distance mode {self.distance_mode!r}")
        if self.stiffness is not None and not self.stiffness > 0:
            raise DomainError("stiffness override must be positive")

    def stiffness_at(self, dt: float, units: Units = Units()) -> float:
        return self.stiffness if self.stiffness is not None else stiffness_for_step(dt, units)


def glued_score(x, a, k: float, g: Drift) -> np.ndarray:
    """g(x) + k (x - a): gradient of V(x) + k |x - a|^2 / 2 with V's gradient replaced by g."""
    x = np.asarray(x, dtype=float)
    return as_gradient(g)(x) + k * (x - np.asarray(a, dtype=float))


def glued_energy(x, a, k: float, value) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(a, dtype=float)
    return value(x) + 0.5 * k * np.sum(d * d, axis=-1)


def adjacent_glue_step(x_prev, x, dt: float, g: Drift, noise: Noise, units: Units = Units(),
                       stiffness: float | None = None) -> np.ndarray:
    """x - (g(x) + k (x - x_prev)) dt + sqrt(2 D dt) xi with k = k(dt) by default."""
    _check_dt(dt)
    x = np.asarray(x, dtype=float)
    k = stiffness if stiffness is not None else stiffness_for_step(dt, units)
    drift = _check(glued_score(x, x_prev, k, g), "glued drift", noise)
    return x - drift * dt + noise_scale(units.D, dt) * _draw(noise, x)


def anchored_glue_step(x, dt: float, g: Drift, k_a: float, noises: tuple[Noise, Noise],
                       units: Units = Units()) -> tuple[np.ndarray, np.ndarray]:
    """Draw an anchor A ~ N(x, (beta k_a)^-1 I), then take a glued EM step toward it.

    Returns ``(x_new, anchor)``.
    """
    _check_dt(dt)
    if not k_a > 0:
        raise DomainError("k_a must be positive")
    x = np.asarray(x, dtype=float)
    anchor = x + _draw(noises[0], x) / math.sqrt(units.beta * k_a)
    drift = _check(glued_score(x, anchor, k_a, g), "glued drift", noises[1])
    return x - drift * dt + noise_scale(units.D, dt) * _draw(noises[1], x), anchor


def tempered_kernel_step(x, dt: float, upsilon: float, g: Drift, noise: Noise,
                         units: Units = Units()) -> np.ndarray:
    """Harmonic kernel step with covariance 2 D dt upsilon I and unchanged mean."""
    if not upsilon > 0:
        raise DomainError("upsilon must be positive")
    return harmonic_kernel_step(x, dt, g, noise, units, upsilon=upsilon)


def effective_temperature(T: float, upsilon: float) -> float:
    return upsilon * T


def effective_stiffness(k: float, upsilon: float) -> float:
    return k / upsilon


# ---------------------------------------------------------------- radial glue

def _prepare_frames(coords, align: bool) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 3 or coords.shape[-1] != 3:
        raise DomainError("coords must have shape [T, N, 3]")
    if coords.shape[0] < 2:
        raise DomainError("Need at least two frames (T >= 2).")
    frames = center_frames(coords)
    if align:
        ref = frames[0]
        frames = np.stack([frames[0]] + [kabsch_align(ref, f).aligned for f in frames[1:]])
    return frames


def per_frame_distances(frames: np.ndarray, eps: float) -> np.ndarray:
    """d_t: RMS distance of frame t to frame t+1 (the last frame uses t-1), plus eps."""
    N = frames.shape[1]
    nxt = np.concatenate([frames[1:], frames[-2:-1]])
    return np.sqrt(np.sum((frames - nxt) ** 2, axis=(1, 2)) / N) + eps


def _weights(spec: GlueSpec) -> np.ndarray:
    return spec.rho ** np.arange(spec.S)


def radial_glue_forces(coords, spec: GlueSpec, align: bool = True) -> np.ndarray:
    """Temporal glue stack of shape [T, N, 3].

    ``per-frame`` mode uses one force scalar f_t = -k (d_t - r_min) per frame
    and accumulates rho^(s-1) f_t (X_t - X_{t+s}) / N onto slice t and its
    negative onto slice t+s.  ``pairwise`` mode returns -grad U_glue with the
    pair distances r_{t,s}.  Frames are centred, and Kabsch-aligned to frame 0
    if ``align``; the stack is expressed in those processed coordinates.
    """
    if spec.kind != "radial-rmin":
        raise DomainError("radial_glue_forces needs a radial-rmin GlueSpec")
    frames = _prepare_frames(coords, align)
    T, N, _ = frames.shape
    k = spec.stiffness if spec.stiffness is not None else RADIAL_DEFAULT_K
    w = _weights(spec)
    out = np.zeros_like(frames)
    if spec.distance_mode == "per-frame":
        f = -k * (per_frame_distances(frames, spec.eps) - spec.r_min)
        for s in range(1, min(spec.S, T - 1) + 1):
            dR = frames[:-s] - frames[s:]
            contrib = w[s - 1] * f[:-s, None, None] * dR / N
            out[:-s] += contrib
            out[s:] -= contrib
    else:
        for s in range(1, min(spec.S, T - 1) + 1):
            dR = frames[:-s] - frames[s:]
            r = np.sqrt(np.sum(dR * dR, axis=(1, 2)) / N) + spec.eps
            coef = -w[s - 1] * k * (r - spec.r_min) / (N * r)
            contrib = coef[:, None, None] * dR
            out[:-s] += contrib
            out[s:] -= contrib
    return out


def radial_glue_energy(coords, spec: GlueSpec, align: bool = False, frozen_forces: np.ndarray | None = None
                       ) -> float:
    """Energy whose negative gradient is :func:`radial_glue_forces` (align=False).

    For ``pairwise`` mode this is U_glue = (k/2) sum_t sum_s alpha_s (r_{t,s} - r_min)^2.
    For ``per-frame`` mode the force scalars f_t are held fixed (at their
    values for ``coords`` unless ``frozen_forces`` is given), giving
    -sum_t sum_s rho^(s-1) f_t |X_t - X_{t+s}|^2 / (2N).
    """
    frames = _prepare_frames(coords, align)
    T, N, _ = frames.shape
    k = spec.stiffness if spec.stiffness is not None else RADIAL_DEFAULT_K
    w = _weights(spec)
    total = 0.0
    if spec.distance_mode == "per-frame":
        f = frozen_forces if frozen_forces is not None else -k * (per_frame_distances(frames, spec.eps) - spec.r_min)
        for s in range(1, min(spec.S, T - 1) + 1):
            sq = np.sum((frames[:-s] - frames[s:]) ** 2, axis=(1, 2))
            total -= w[s - 1] * float(np.sum(f[:-s] * sq)) / (2 * N)
    else:
        for s in range(1, min(spec.S, T - 1) + 1):
            r = np.sqrt(np.sum((frames[:-s] - frames[s:]) ** 2, axis=(1, 2)) / N) + spec.eps
            total += 0.5 * k * w[s - 1] * float(np.sum((r - spec.r_min) ** 2))
    return total


def per_frame_force_scalars(coords, spec: GlueSpec, align: bool = False) -> np.ndarray:
    frames = _prepare_frames(coords, align)
    k = spec.stiffness if spec.stiffness is not None else RADIAL_DEFAULT_K
    return -k * (per_frame_distances(frames, spec.eps) - spec.r_min)


@dataclass
class GlueKernel:
    """Batch stepper for adjacent or anchored glue with the StepKernel ``advance`` interface.

    Adjacent glue tethers each replica to its own previous state (x_prev).
    """

    kind: str
    drift: Drift
    units: Units = Units()
    k_a: float = 1.0
    stiffness: float | None = None

    def __post_init__(self):
        if self.kind not in ("adjacent", "anchored"):
            raise DomainError(f"GlueKernel supports adjacent/anchored, got {self.kind!r}")

    @property
    def stages(self) -> int:
        return 2 if self.kind == "anchored" else 1

    def advance(self, x, dt: float, seed: int, n: int, b0: int = 0, x_prev=None, v=None, stage_offset: int = 0):
        from .core import STAGE_ANCHOR, STAGE_MAIN, batch_normals

        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = b0 + np.arange(x.shape[0])
        xi = batch_normals(seed, n, b, stage_offset + STAGE_MAIN, x.shape[-1])
        if self.kind == "adjacent":
            prev = x if x_prev is None else x_prev
            return adjacent_glue_step(prev, x, dt, self.drift, xi, self.units, self.stiffness)
        xa = batch_normals(seed, n, b, stage_offset + STAGE_ANCHOR, x.shape[-1])
        return anchored_glue_step(x, dt, self.drift, self.k_a, (xa, xi), self.units)[0]
