"""Counter-based Gaussian noise for reproducible parallel Monte Carlo.

Every normal increment is a pure function of ``(seed, path_index, counter)``
where the counter encodes the step index and the coordinate slot.  Paths are
therefore bit-reproducible regardless of how they are partitioned into blocks
or spread over worker threads, and nested-horizon runs with a common ``dt``
reuse identical increments for the shared steps.

The mixing function is the splitmix64 finalizer applied as a keyed hash
chain; uniforms are mapped to normals through the exact inverse normal CDF.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

def _splitmix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    # uint64 arithmetic wraps mod 2**64 by design
    with np.errstate(over="ignore"):
        z = z + _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def path_keys(seed: int, path_indices: np.ndarray) -> np.ndarray:
    """64-bit per-path keys derived from the run seed; also reported as
    the per-path seeds of a batch."""
    s = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return _splitmix64(s ^ np.asarray(path_indices, dtype=np.uint64))


def _uniforms(keys: np.ndarray, counters: np.ndarray) -> np.ndarray:
    h = _splitmix64(keys ^ counters)
    # top 53 bits -> open (0, 1)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


def step_normals(keys: np.ndarray, step: int, n_dims: int) -> np.ndarray:
    """Standard normal increments for one Euler step.

    Parameters
    ----------
    keys : (B,) uint64 per-path keys from :func:`path_keys`.
    step : step index within the path.
    n_dims : number of Brownian coordinates.

    Returns
    -------
    (B, n_dims) float64 array.
    """
    with np.errstate(over="ignore"):
        base = np.uint64(step) * np.uint64(n_dims)
        counters = base + np.arange(n_dims, dtype=np.uint64)
    u = _uniforms(keys[:, None], counters[None, :])
    return ndtri(u)


def scalar_normals(seed: int, path_indices: np.ndarray, step: int, n_dims: int) -> np.ndarray:
    """Convenience wrapper: keys derived on the fly (used in tests)."""
    return step_normals(path_keys(seed, path_indices), step, n_dims)
