"""Time-parallel execution on the (n, b) lattice and the batch sampler.

A macro-iteration advances every site by one split step: a horizontal
half-pass, a vertical full pass, and a second horizontal half-pass.  The
horizontal kernel couples a site to its neighbours (n, b-1) and (n, b+1),
so each horizontal half-pass is executed as two colour sub-sweeps (parity
of n + b); within a sub-sweep no two updated sites are neighbours.  All
noise is keyed on (seed, n, b, stage) with the macro-iteration folded into
the stage, which makes results independent of worker count and visiting
order.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    STAGE_ACCEPT,
    STAGE_INIT,
    STAGE_LATE,
    STAGE_MAIN,
    STAGE_SWAP,
    STAGE_VERTICAL,
    STAGES_PER_GENERATION,
    DomainError,
    Schedule,
    Units,
    batch_normals,
    batch_uniforms,
)
from .exactness import SheetSpec, propose
from .integrators import StepKernel, _split_check


def color_of(n: int, b: int) -> int:
    return (n + b) % 2


@dataclass
class TrajectoryLattice:
    """States of shape (N + 1, B + 1, d): row n is a time slice, column b a replica."""

    states: np.ndarray
    schedule: Schedule
    generation: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3:
            raise DomainError("lattice states must have shape (N+1, B+1, d)")
        if len(self.schedule) != self.states.shape[0]:
            raise DomainError("schedule needs one step size per lattice row")

    @classmethod
    def initialize(cls, N: int, B: int, dim: int, dt: float, seed: int, scale: float = 1.0) -> "TrajectoryLattice":
        """Standard normal initial states drawn at stage STAGE_INIT of every site."""
        n = np.arange(N + 1)[:, None]
        b = np.arange(B + 1)[None, :]
        x = scale * batch_normals(seed, n, b, STAGE_INIT, dim)
        return cls(x, Schedule.uniform(N + 1, dt))

    @property
    def N(self) -> int:
        return self.states.shape[0] - 1

    @property
    def B(self) -> int:
        return self.states.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def site(self, n: int, b: int) -> np.ndarray:
        return self.states[n, b]

    def copy(self) -> "TrajectoryLattice":
        return TrajectoryLattice(self.states.copy(), self.schedule, self.generation)


@dataclass
class HorizontalCoupling:
    """Horizontal energy at (n, b): (k/2) sum over existing b-neighbours |x - x_nb|^2 + U(x; lambda_b).

    ``sheet_gradient(x, lam)`` is the x-gradient of the sheet energy and
    ``sheet`` enables replica-exchange swaps between neighbouring columns.
    """

    stiffness: float = 0.0
    sheet: SheetSpec | None = None
    sheet_gradient: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    swaps: bool = False

    def gradient(self, states: np.ndarray, ns: np.ndarray, bs: np.ndarray) -> np.ndarray:
        x = states[ns, bs]
        B = states.shape[1] - 1
        g = np.zeros_like(x)
        if self.stiffness:
            left = bs > 0
            right = bs < B
            g[left] += self.stiffness * (x[left] - states[ns[left], bs[left] - 1])
            g[right] += self.stiffness * (x[right] - states[ns[right], bs[right] + 1])
        if self.sheet_gradient is not None:
            lam = bs / max(B, 1)
            g += self.sheet_gradient(x, lam[:, None])
        return g


def _chunks(idx: np.ndarray, workers: int) -> list[np.ndarray]:
    if workers <= 1 or idx.size <= 1:
        return [idx]
    return [c for c in np.array_split(idx, workers) if c.size]


def resolve_workers(workers: int) -> int:
    if workers == 0:
        return os.cpu_count() or 1
    return max(1, int(workers))


class _Pool:
    def __init__(self, workers: int):
        self.workers = resolve_workers(workers)
        self.ex = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def run(self, fn, idx: np.ndarray) -> None:
        parts = _chunks(idx, self.workers)
        if self.ex is None:
            for p in parts:
                fn(p)
        else:
            for f in [self.ex.submit(fn, p) for p in parts]:
                f.result()

    def close(self):
        if self.ex is not None:
            self.ex.shutdown()


def _horizontal_subsweep(lat, horizontal, color, stage, frac, seed, units, pool):
    N1, B1, d = lat.states.shape
    n_all, b_all = np.meshgrid(np.arange(N1), np.arange(B1), indexing="ij")
    mask = (n_all + b_all) % 2 == color
    ns, bs = n_all[mask], b_all[mask]
    order = np.arange(ns.size)
    states = lat.states

    def work(ix):
        n, b = ns[ix], bs[ix]
        dt = lat.schedule.dts[n][:, None]
        g = horizontal.gradient(states, n, b)
        xi = batch_normals(seed, n, b, stage, d)
        new = states[n, b] - 0.5 * dt * g + np.sqrt(2.0 * units.D * dt * frac) * xi
        states[n, b] = new

    pool.run(work, order)


def _swap_subsweep(lat, horizontal, color, stage, seed, units):
    sheet = horizontal.sheet
    states = lat.states
    N1, B1, _ = states.shape
    lam = np.arange(B1) / max(B1 - 1, 1)
    for n in range(N1):
        for b in range((color - n) % 2, B1 - 1, 2):
            x0, x1 = states[n, b], states[n, b + 1]
            delta = sheet.u(x1, lam[b]) + sheet.u(x0, lam[b + 1]) - sheet.u(x0, lam[b]) - sheet.u(x1, lam[b + 1])
            la = -units.beta * float(delta)
            if la >= 0 or math.log(float(batch_uniforms(seed, n, b, stage))) < la:
                states[n, b], states[n, b + 1] = x1.copy(), x0.copy()


def macro_iteration(lat: TrajectoryLattice, vertical: StepKernel, horizontal: HorizontalCoupling | None,
                    split=(0.5, 0.5), seed: int = 0, workers: int = 1, units: Units | None = None
                    ) -> TrajectoryLattice:
    """Advance every site by one split step in place and return the lattice.

    With ``horizontal=None`` the whole diffusion budget goes to the vertical
    kernel, so the update is a plain vertical step per site.
    """
    units = units or vertical.units
    a_v, a_h = _split_check(split) if horizontal is not None else (1.0, 0.0)
    base = lat.generation * STAGES_PER_GENERATION
    pool = _Pool(workers)
    try:
        if horizontal is not None:
            for c in (0, 1):
                _horizontal_subsweep(lat, horizontal, c, base + STAGE_MAIN, 0.5 * a_h, seed, units, pool)
                if horizontal.swaps and horizontal.sheet is not None:
                    _swap_subsweep(lat, horizontal, c, base + STAGE_SWAP, seed, units)
        _vertical_pass(lat, vertical, a_v, base + STAGE_VERTICAL, seed, pool)
        if horizontal is not None:
            for c in (1, 0):
                _horizontal_subsweep(lat, horizontal, c, base + STAGE_LATE, 0.5 * a_h, seed, units, pool)
    finally:
        pool.close()
    lat.generation += 1
    return lat


def _vertical_pass(lat, vertical: StepKernel, frac, stage, seed, pool):
    if vertical.kind not in ("em-overdamped", "heun"):
        raise DomainError("vertical lattice kernel must be em-overdamped or heun")
    N1, B1, d = lat.states.shape
    states = lat.states
    ns = np.repeat(np.arange(N1), B1)
    bs = np.tile(np.arange(B1), N1)
    scale = 1.0 if frac == 1.0 else math.sqrt(frac)

    def work(ix):
        n, b = ns[ix], bs[ix]
        xi = batch_normals(seed, n, b, stage, d)
        if scale != 1.0:
            xi = scale * xi
        x = states[n, b]
        dts = lat.schedule.dts[n]
        out = np.empty_like(x)
        for dt in np.unique(dts):
            sel = dts == dt
            out[sel] = vertical.apply(x[sel], float(dt), [xi[sel]])
        states[n, b] = out

    pool.run(work, np.arange(ns.size))


def run_lattice(lat: TrajectoryLattice, vertical: StepKernel, horizontal: HorizontalCoupling | None,
                n_iterations: int, split=(0.5, 0.5), seed: int = 0, workers: int = 1) -> TrajectoryLattice:
    for _ in range(n_iterations):
        macro_iteration(lat, vertical, horizontal, split, seed, workers)
    return lat


# ---------------------------------------------------------------- batch sampler

@dataclass
class BatchTrajectory:
    x: np.ndarray
    times: np.ndarray
    v: np.ndarray | None = None
    accepted: np.ndarray | None = None

    @property
    def acceptance_rate(self) -> float | None:
        return None if self.accepted is None else float(self.accepted.mean())


def initial_batch(B: int, dim: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """x_{0,b} ~ N(0, scale^2 I), drawn at site (0, b, STAGE_INIT)."""
    return scale * batch_normals(seed, 0, np.arange(B), STAGE_INIT, dim)


def parallel_batch_sample(kernel, steps: int, dt: float | Schedule, seed: int, x0=None, B: int | None = None,
                          dim: int | None = None, mh_target=None, v0=None, record_every: int = 1
                          ) -> BatchTrajectory:
    """Advance B independent replicas for ``steps`` steps.

    ``kernel`` is a :class:`StepKernel` or any object with the same ``advance``
    signature.  Step n of replica b uses RNG site (n, b, stage).  With
    ``mh_target`` each proposal is accepted or rejected against
    exp(-beta V_target).  A schedule with tempering factors scales the
    noise of step n by sqrt(upsilon_n).
    """
    sched = dt if isinstance(dt, Schedule) else Schedule.uniform(steps, dt)
    if len(sched) < steps:
        raise DomainError("schedule shorter than the number of steps")
    if x0 is None:
        if B is None or dim is None:
            raise DomainError("give x0 or both B and dim")
        x0 = initial_batch(B, dim, seed)
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    Bn = x.shape[0]
    b = np.arange(Bn)
    underdamped = getattr(kernel, "kind", None) == "em-underdamped"
    v = None
    if underdamped:
        units = kernel.units
        v = (np.sqrt(units.D) * batch_normals(seed, 1, b, STAGE_INIT, x.shape[-1])
             if v0 is None else np.atleast_2d(np.asarray(v0, dtype=float)).copy())
    xs, vs = [x.copy()], [v.copy()] if underdamped else None
    acc = np.zeros((steps, Bn), dtype=bool) if mh_target is not None else None
    x_prev = x
    if mh_target is not None:
        e_x = mh_target.value(x)
    for n in range(steps):
        h = float(sched.dts[n])
        ups = float(sched.upsilons[n])
        if mh_target is not None:
            if ups != 1.0:
                raise DomainError("MH correction is not defined for tempered steps")
            y, fwd, rev = propose(kernel, x, h, seed, n, b)
            e_y = mh_target.value(y)
            lr = -kernel.units.beta * (e_y - e_x) + rev - fwd
            u = batch_uniforms(seed, n, b, STAGE_ACCEPT)
            ok = np.isfinite(lr) & ((lr >= 0) | (np.log(u) < np.nan_to_num(lr, nan=-np.inf)))
            x_new = np.where(ok[:, None], y, x)
            e_x = np.where(ok, e_y, e_x)
            acc[n] = ok
        elif ups != 1.0:
            noises = [math.sqrt(ups) * z for z in kernel.draw(seed, n, b, x.shape[-1])]
            x_new = kernel.apply(x, h, noises, x_prev=x_prev, v=v)
        else:
            x_new = kernel.advance(x, h, seed, n, x_prev=x_prev, v=v)
        if underdamped:
            x_new, v = x_new
        x_prev, x = x, x_new
        if (n + 1) % record_every == 0:
            xs.append(x.copy())
            if underdamped:
                vs.append(v.copy())
    times = np.concatenate([[0.0], np.cumsum(sched.dts[:steps])])[::record_every]
    return BatchTrajectory(np.stack(xs), times, np.stack(vs) if underdamped else None, acc)
