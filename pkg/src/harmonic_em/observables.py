"""Trajectory analytics: R_g, circular ACF, tau_int, correlation and distance matrices, Kabsch."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import TOLERANCES, DomainError


@dataclass
class ObservableSeries:
    values: np.ndarray
    dt_phys: float = 1.0
    label: str = "observable"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size < 1 or not np.all(np.isfinite(self.values)):
            raise DomainError("series must be non-empty and finite")

    def lag_axes(self, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
        """Frame-index lags and the matching physical times lag * dt_phys."""
        lags = np.arange(max_lag + 1)
        return lags, lags * self.dt_phys


class AngleSeries(ObservableSeries):
    """Angles stored wrapped to [-pi, pi)."""

    def __post_init__(self):
        super().__post_init__()
        self.values = (self.values + math.pi) % (2 * math.pi) - math.pi

    @property
    def thetas(self) -> np.ndarray:
        return self.values


def center_frames(frames: np.ndarray) -> np.ndarray:
    """Subtract each frame's (unweighted) centre of mass; frames has shape (..., N, 3)."""
    frames = np.asarray(frames, dtype=float)
    return frames - frames.mean(axis=-2, keepdims=True)


def radius_of_gyration(frame) -> np.ndarray:
    """sqrt(mean_i |r_i - r_cm|^2) for a frame (N, 3) or a stack (..., N, 3)."""
    c = center_frames(frame)
    return np.sqrt(np.mean(np.sum(c * c, axis=-1), axis=-1))


@dataclass
class KabschResult:
    rotation: np.ndarray
    aligned: np.ndarray
    rmsd: float
    degenerate: bool


def kabsch_align(reference, moving) -> KabschResult:
    """Proper rotation R minimising |ref_c - moving_c R|; aligned = moving_c R.

    Both frames are centred first, so ``aligned`` sits at the origin.
    """
    ref = center_frames(reference)
    mov = center_frames(moving)
    if ref.shape != mov.shape or ref.ndim != 2:
        raise DomainError("frames must have equal shape (N, 3)")
    H = mov.T @ ref
    U, S, Vt = np.linalg.svd(H)
    sign = 1.0 if np.linalg.det(U @ Vt) >= 0 else -1.0
    Dm = np.diag([1.0] * (H.shape[0] - 1) + [sign])
    R = U @ Dm @ Vt
    aligned = mov @ R
    rmsd = math.sqrt(float(np.mean(np.sum((aligned - ref) ** 2, axis=-1))))
    scale = max(S[0], 1.0)
    degenerate = bool(np.sum(S > TOLERANCES.kabsch_rank_tol * scale) < 2)
    return KabschResult(R, aligned, rmsd, degenerate)


def rmsd(a, b, align: bool = True) -> float:
    if align:
        return kabsch_align(a, b).rmsd
    d = center_frames(a) - center_frames(b)
    return math.sqrt(float(np.mean(np.sum(d * d, axis=-1))))


def pairwise_distance_matrix(frames, align: bool = True) -> np.ndarray:
    """Symmetric B x B RMSD matrix between centred (optionally aligned) frames."""
    frames = np.asarray(frames, dtype=float)
    B = frames.shape[0]
    out = np.zeros((B, B))
    for i in range(B):
        for j in range(i + 1, B):
            out[i, j] = out[j, i] = rmsd(frames[i], frames[j], align)
    return out


def batch_correlation_matrix(rows) -> np.ndarray:
    """Pearson correlation between rows; rows with zero variance give NaN entries."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise DomainError("need a (B, L) array with L >= 2")
    c = rows - rows.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(c * c, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        u = c / norms[:, None]
        R = u @ u.T
    R = np.clip(R, -1.0, 1.0)
    ok = norms > 0
    np.fill_diagonal(R, np.where(ok, 1.0, np.nan))
    R[~ok, :] = np.nan
    R[:, ~ok] = np.nan
    return R


def circular_acf(angles, max_lag: int) -> np.ndarray:
    """C(tau) = mean_t cos(theta_t - theta_{t+tau}) for tau = 0..max_lag."""
    th = np.asarray(angles.values if isinstance(angles, ObservableSeries) else angles, dtype=float).ravel()
    if th.size == 0:
        raise DomainError("empty angle series")
    if not 0 <= max_lag < th.size:
        raise DomainError("max_lag must be smaller than the series length")
    z = np.exp(1j * th)
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for tau in range(1, max_lag + 1):
        out[tau] = float(np.mean((z[:-tau] * np.conj(z[tau:])).real))
    return np.clip(out, -1.0, 1.0)


def autocorrelation(values) -> np.ndarray:
    """Normalised autocorrelation rho(tau) for all lags (FFT, biased estimator)."""
    x = np.asarray(values, dtype=float).ravel()
    x = x - x.mean()
    n = x.size
    f = np.fft.rfft(x, n=2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    if acov[0] <= 0:
        return np.full(n, np.nan)
    return acov / acov[0]


def integrated_autocorrelation(series, c: float = 5.0, circular: bool = False) -> tuple[float, float]:
    """(tau_int, n_eff) with tau_int = 1 + 2 sum_{t=1}^{W} rho(t) and n_eff = N / (2 tau_int).

    W is the smallest window with W >= c * tau_int(W).  ``circular`` uses the
    circular ACF of an angle series instead of the normalised ACF.
    """
    vals = series.values if isinstance(series, ObservableSeries) else np.asarray(series, dtype=float).ravel()
    n = vals.size
    if n < 10:
        raise DomainError("need at least 10 samples")
    if np.ptp(vals) == 0:
        return math.inf, 0.0
    rho = circular_acf(vals, n - 1) if circular else autocorrelation(vals)
    taus = 1.0 + 2.0 * np.cumsum(rho[1:])
    windows = np.arange(1, n)
    ok = np.nonzero(windows >= c * taus)[0]
    tau = float(taus[ok[0]]) if ok.size else float(taus[-1])
    return tau, n / (2.0 * tau)


def dihedral(p0, p1, p2, p3) -> np.ndarray:
    """Signed dihedral angle in (-pi, pi] for point quadruples (broadcasts over leading axes)."""
    p0, p1, p2, p3 = (np.asarray(p, dtype=float) for p in (p0, p1, p2, p3))
    b0, b1, b2 = p0 - p1, p2 - p1, p3 - p2
    b1n = b1 / np.linalg.norm(b1, axis=-1, keepdims=True)
    v = b0 - np.sum(b0 * b1n, axis=-1, keepdims=True) * b1n
    w = b2 - np.sum(b2 * b1n, axis=-1, keepdims=True) * b1n
    x = np.sum(v * w, axis=-1)
    y = np.sum(np.cross(b1n, v) * w, axis=-1)
    return np.arctan2(y, x)


def weighted_acf_sum(acf, dt_phys: float = 1.0, weights=None) -> float:
    """Trapezoid-free Riemann sum dt * sum_tau w_tau C(tau), a Green-Kubo style integral."""
    acf = np.asarray(acf, dtype=float)
    w = np.ones_like(acf) if weights is None else np.asarray(weights, dtype=float)
    return float(dt_phys * np.sum(w * acf))
