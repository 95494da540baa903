"""Counter-based Gaussian draws keyed on lattice sites.

Every draw is a pure function of ``(master_seed, n, b, stage)``: the site
coordinates form the Philox4x64-10 counter and the seed forms the key, so
the order in which sites are visited (or which worker visits them) never
changes a value.  The block function below is bit-compatible with
:class:`numpy.random.Philox`; it exists only because numpy cannot evaluate
Philox for a whole array of counters at once.
"""
from __future__ import annotations

import numpy as np

_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_PHILOX_M0 = np.uint64(0xD2E7470EE14C6C93)
_PHILOX_M1 = np.uint64(0xCA5A826395121157)
_PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
_PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)
_ROUNDS = 10

# second key word; keeps these streams disjoint from a plain Philox(key=seed)
STREAM_TAG = 0x48454D5F534954  # "HEM_SIT"


def _mulhilo(a: np.ndarray, b: np.uint64) -> tuple[np.ndarray, np.ndarray]:
    """Full 64x64 -> 128 bit product split into (hi, lo) words."""
    a_lo, a_hi = a & _M32, a >> _S32
    b_lo, b_hi = b & _M32, b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _M32) + (hl & _M32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    lo = a * b
    return hi, lo


def philox4x64(counter: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Evaluate the Philox4x64-10 block function.

    ``counter`` has shape ``(..., 4)`` of uint64; the result has the same shape.
    """
    ctr = np.asarray(counter, dtype=np.uint64)
    x0, x1, x2, x3 = (ctr[..., i].copy() for i in range(4))
    k0 = np.uint64(key[0] & 0xFFFFFFFFFFFFFFFF)
    k1 = np.uint64(key[1] & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for r in range(_ROUNDS):
            if r:
                k0 = k0 + _PHILOX_W0
                k1 = k1 + _PHILOX_W1
            hi0, lo0 = _mulhilo(x0, _PHILOX_M0)
            hi1, lo1 = _mulhilo(x2, _PHILOX_M1)
            x0, x1, x2, x3 = hi1 ^ x1 ^ k0, lo1, hi0 ^ x3 ^ k1, lo0
    return np.stack([x0, x1, x2, x3], axis=-1)


def _counters(n, b, stage, n_blocks: int) -> np.ndarray:
    n, b, stage = np.broadcast_arrays(
        np.asarray(n, dtype=np.uint64),
        np.asarray(b, dtype=np.uint64),
        np.asarray(stage, dtype=np.uint64),
    )
    shape = n.shape + (n_blocks, 4)
    ctr = np.empty(shape, dtype=np.uint64)
    ctr[..., 0] = np.arange(n_blocks, dtype=np.uint64)
    ctr[..., 1] = n[..., None]
    ctr[..., 2] = b[..., None]
    ctr[..., 3] = stage[..., None]
    return ctr


def _to_unit(words: np.ndarray) -> np.ndarray:
    # 53-bit mantissa, strictly inside (0, 1) so log() below is finite
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def site_uniforms(seed: int, n, b, stage) -> np.ndarray:
    """One U(0,1) variate per site; shape is the broadcast of the site arrays."""
    words = philox4x64(_counters(n, b, stage, 1), (seed, STREAM_TAG))
    return _to_unit(words[..., 0, 0])


def site_normals(seed: int, n, b, stage, dim: int) -> np.ndarray:
    """Standard normal vectors of length ``dim`` for every site.

    Four normals per Philox block via the Box-Muller transform.  Output shape
    is ``broadcast(n, b, stage).shape + (dim,)``.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    n_blocks = -(-dim // 4)
    u = _to_unit(philox4x64(_counters(n, b, stage, n_blocks), (seed, STREAM_TAG)))
    r1 = np.sqrt(-2.0 * np.log(u[..., 0]))
    r2 = np.sqrt(-2.0 * np.log(u[..., 2]))
    t1 = 2.0 * np.pi * u[..., 1]
    t2 = 2.0 * np.pi * u[..., 3]
    z = np.stack([r1 * np.cos(t1), r1 * np.sin(t1), r2 * np.cos(t2), r2 * np.sin(t2)], axis=-1)
    z = z.reshape(z.shape[:-2] + (4 * n_blocks,))
    return z[..., :dim]
