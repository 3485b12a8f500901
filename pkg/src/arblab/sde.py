"""Path engines for the market, auxiliary, and weight diffusions.

All three processes share one blocked Euler kernel driven by counter-based
noise, so a path's increments depend only on ``(seed, path_index, step)``:
results are bit-identical for any worker count or block partition, and runs
with nested horizons at a common ``dt`` share their increments.

Process kinds
-------------
market     dX = frak_b(X) dt + frak_s(X) dW on the open orthant.  States are
           floored from below and flagged, never absorbed.  The running
           integral of the killing rate k(X) is accumulated by trapezoid
           rule for deflator use.
auxiliary  dY = bhat(Y) dt + frak_s(Y) dW on the closed orthant.  A path is
           absorbed (frozen) at the first step where min_i Y_i falls to the
           detection threshold; the absorption time is recorded.
weights    d nu_i = nu_i (e_i - nu)' s(nu) dW on the simplex, for models
           whose coefficients are functions of the weights alone.  States
           are renormalized each step; absorption as above.
"""

from __future__ import annotations

import csv
import gzip
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .errors import ConfigInvalid, NonPositiveState, SimplexViolation
from .models import ModelSpec

_BLOCK = 16384           # paths per kernel block (fixed: partition-independent)

SCHEMES = ("euler", "full_truncation_euler")


@dataclass(frozen=True)
class SimConfig:
    """Time-stepping configuration.

    ``dt * n_steps`` must equal the requested horizon to within 1e-12.
    ``hit_epsilon=None`` resolves at simulation time to 1e-4 times the
    smallest initial coordinate.  ``record_stride`` controls how often the
    state is written out; the terminal step is always recorded.
    """

    dt: float
    n_steps: int
    scheme: str = "euler"
    seed: int = 0
    hit_epsilon: Optional[float] = None
    record_stride: int = 1

    def __post_init__(self):
        if self.n_steps < 0:
            raise ConfigInvalid("n_steps must be nonnegative")
        if self.n_steps > 0 and self.dt <= 0:
            raise ConfigInvalid("dt must be positive")
        if self.scheme not in SCHEMES:
            raise ConfigInvalid(f"scheme must be one of {SCHEMES}")
        if self.hit_epsilon is not None and self.hit_epsilon <= 0:
            raise ConfigInvalid("hit_epsilon must be positive")
        if self.record_stride < 1:
            raise ConfigInvalid("record_stride must be >= 1")
        if not (0 <= self.seed < 2**64):
            raise ConfigInvalid("seed must fit in 64 bits")

    @classmethod
    def for_horizon(cls, horizon: float, *, dt: float = None,
                    steps_per_unit: int = 2000, seed: int = 0,
                    scheme: str = "euler", hit_epsilon: float = None,
                    record_stride: int = None) -> "SimConfig":
        """Build a config whose grid matches ``horizon`` exactly.

        Defaults give at least 2000 steps per unit of horizon.  When
        ``record_stride`` is omitted only the initial and terminal states
        are recorded.
        """
        if horizon < 0:
            raise ConfigInvalid("horizon must be nonnegative")
        if horizon == 0:
            return cls(dt=1.0, n_steps=0, scheme=scheme, seed=seed,
                       hit_epsilon=hit_epsilon, record_stride=record_stride or 1)
        if dt is not None:
            n_steps = max(1, round(horizon / dt))
        else:
            n_steps = max(1, math.ceil(horizon * steps_per_unit))
        stride = record_stride if record_stride is not None else n_steps
        return cls(dt=horizon / n_steps, n_steps=n_steps, scheme=scheme,
                   seed=seed, hit_epsilon=hit_epsilon, record_stride=stride)

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    def check_horizon(self, horizon: float) -> None:
        if abs(self.horizon - horizon) > 1e-12 * max(1.0, abs(horizon)):
            raise ConfigInvalid(
                f"dt*n_steps = {self.horizon} does not match horizon {horizon}"
            )

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "n_steps": self.n_steps,
            "scheme": self.scheme,
            "seed": self.seed,
            "hit_epsilon": self.hit_epsilon,
            "record_stride": self.record_stride,
        }


@dataclass(frozen=True)
class PathBatch:
    """A batch of simulated trajectories recorded on a common time grid.

    ``hit_time`` is NaN for paths that never triggered the absorption rule;
    otherwise it is the time of the step at which the rule fired, and the
    states are frozen at the absorbed value from then on.  ``integrals``
    holds the running trapezoid integral of the killing rate at the recorded
    times (market paths only; zero otherwise).  ``clamped`` flags paths whose
    state was floored at least once.
    """

    times: np.ndarray
    states: np.ndarray
    hit_time: np.ndarray
    integrals: np.ndarray
    path_seeds: np.ndarray
    clamped: np.ndarray
    hit_epsilon: float
    cfg: SimConfig

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_assets(self) -> int:
        return self.states.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    @property
    def terminal_integral(self) -> np.ndarray:
        return self.integrals[:, -1]

    def hit_fraction(self, horizon: float = None) -> float:
        h = self.times[-1] if horizon is None else horizon
        return float(np.mean(~np.isnan(self.hit_time) & (self.hit_time <= h)))

    def to_csv(self, path: str) -> None:
        """Dump (path_id, time, x_1..x_n, hit_flag) rows; gzip for ``.gz``."""
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wt", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["path_id", "time"]
                + [f"x_{i + 1}" for i in range(self.n_assets)]
                + ["hit_flag"]
            )
            for p in range(self.n_paths):
                ht = self.hit_time[p]
                for j, t in enumerate(self.times):
                    flag = int(not np.isnan(ht) and ht <= t)
                    writer.writerow(
                        [p, f"{t:.12g}"]
                        + [f"{v:.17g}" for v in self.states[p, j]]
                        + [flag]
                    )


def _record_steps(n_steps: int, stride: int) -> np.ndarray:
    steps = list(range(0, n_steps + 1, stride))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return np.asarray(steps, dtype=np.int64)


def _resolve_epsilon(cfg: SimConfig, x0: np.ndarray) -> float:
    if cfg.hit_epsilon is not None:
        return cfg.hit_epsilon
    return 1e-4 * float(np.min(x0))


def market_step(model: ModelSpec, X: np.ndarray, z: np.ndarray, dt: float,
                sqrt_dt: float, eps: float, full_trunc: bool):
    """One Euler step of the market diffusion; shared by the path engine and
    the backtester so both see identical transitions.

    Output states are floored at the detection threshold under both schemes
    (keeping coefficients bounded on the next step); ``full_trunc``
    additionally clamps the coefficient arguments of the current step.
    Returns (X_new, low_mask) where low_mask flags floored paths.
    """
    xa = np.maximum(X, eps) if full_trunc else X
    drift = model.frak_drift(xa)
    vol = model.frak_vol(xa)
    X_new = X + drift * dt + np.einsum("bik,bk->bi", vol, z) * sqrt_dt
    low = (X_new < eps).any(axis=1)
    if low.any():
        np.maximum(X_new, eps, out=X_new)
    return X_new, low


def _run_block(model: ModelSpec, x0: np.ndarray, cfg: SimConfig, kind: str,
               eps: float, ids: np.ndarray, rec_steps: np.ndarray,
               out_states: np.ndarray, out_hit: np.ndarray,
               out_integ: np.ndarray, out_clamp: np.ndarray) -> None:
    n = model.n
    B = len(ids)
    dt = cfg.dt
    sqrt_dt = math.sqrt(dt) if cfg.n_steps else 0.0
    keys = rng.path_keys(cfg.seed, ids)
    full_trunc = cfg.scheme == "full_truncation_euler"

    X = np.broadcast_to(x0, (B, n)).astype(np.float64).copy()
    alive = np.ones(B, dtype=bool)
    hit = np.full(B, np.nan)
    integ = np.zeros(B)
    clamp_flag = np.zeros(B, dtype=bool)

    if kind in ("auxiliary", "weights"):
        hit0 = X.min(axis=1) <= eps
        if hit0.any():
            hit[hit0] = 0.0
            alive &= ~hit0

    track_k = kind == "market"
    if track_k:
        xa0 = np.maximum(X, eps) if full_trunc else X
        prev_k = np.asarray(model.deflator_k(xa0), dtype=np.float64)

    rec_ptr = 0
    if rec_steps[0] == 0:
        out_states[:, 0, :] = X
        out_integ[:, 0] = 0.0
        rec_ptr = 1

    for step in range(cfg.n_steps):
        z = rng.step_normals(keys, step, n)
        if kind == "market":
            X, low = market_step(model, X, z, dt, sqrt_dt, eps, full_trunc)
            clamp_flag |= low
            if track_k:
                xa_new = np.maximum(X, eps) if full_trunc else X
                k_new = np.asarray(model.deflator_k(xa_new), dtype=np.float64)
                integ += 0.5 * dt * (prev_k + k_new)
                prev_k = k_new
        elif kind == "auxiliary":
            # alive paths sit strictly above eps; the floor only protects
            # coefficient evaluation on already-absorbed (masked-out) paths
            xa = np.maximum(X, eps)
            drift = model.aux_drift(xa)
            vol = model.frak_vol(xa)
            X_new = X + drift * dt + np.einsum("bik,bk->bi", vol, z) * sqrt_dt
            newly = alive & (X_new.min(axis=1) <= eps)
            X = np.where(alive[:, None], X_new, X)
            if newly.any():
                hit[newly] = (step + 1) * dt
                X[newly] = np.maximum(X[newly], 0.0)
                alive &= ~newly
        else:  # weights
            xa = np.maximum(X, eps)
            s = model.vol_fn(xa)
            drifted = np.einsum("bi,bik->bk", X, s)
            tau = s - drifted[:, None, :]
            incr = X * np.einsum("bik,bk->bi", tau, z) * sqrt_dt
            X_new = X + incr
            X_new /= X_new.sum(axis=1, keepdims=True)
            newly = alive & (X_new.min(axis=1) <= eps)
            X = np.where(alive[:, None], X_new, X)
            if newly.any():
                frozen = np.maximum(X[newly], 0.0)
                frozen /= frozen.sum(axis=1, keepdims=True)
                X[newly] = frozen
                hit[newly] = (step + 1) * dt
                alive &= ~newly

        if rec_ptr < len(rec_steps) and rec_steps[rec_ptr] == step + 1:
            out_states[:, rec_ptr, :] = X
            out_integ[:, rec_ptr] = integ
            rec_ptr += 1

    out_hit[:] = hit
    out_clamp[:] = clamp_flag


def _simulate(model: ModelSpec, x0, horizon: float, n_paths: int,
              cfg: SimConfig, kind: str, workers: int = 1) -> PathBatch:
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != model.n:
        raise ConfigInvalid(f"x0 has {x0.shape[0]} coordinates, model has {model.n}")
    if n_paths < 1:
        raise ConfigInvalid("n_paths must be positive")
    cfg.check_horizon(horizon)
    eps = _resolve_epsilon(cfg, x0)
    if kind == "market" and eps >= float(np.min(x0)):
        raise ConfigInvalid(
            f"hit_epsilon {eps} must be below the smallest initial coordinate"
        )

    rec_steps = _record_steps(cfg.n_steps, cfg.record_stride)
    n_rec = len(rec_steps)
    states = np.empty((n_paths, n_rec, model.n))
    hit = np.empty(n_paths)
    integ = np.zeros((n_paths, n_rec))
    clamped = np.zeros(n_paths, dtype=bool)

    blocks = [(lo, min(lo + _BLOCK, n_paths)) for lo in range(0, n_paths, _BLOCK)]

    def run(lo_hi):
        lo, hi = lo_hi
        ids = np.arange(lo, hi, dtype=np.uint64)
        _run_block(model, x0, cfg, kind, eps, ids, rec_steps,
                   states[lo:hi], hit[lo:hi], integ[lo:hi], clamped[lo:hi])

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, blocks))
    else:
        for b in blocks:
            run(b)

    return PathBatch(
        times=rec_steps * (cfg.dt if cfg.n_steps else 0.0),
        states=states,
        hit_time=hit,
        integrals=integ,
        path_seeds=rng.path_keys(cfg.seed, np.arange(n_paths, dtype=np.uint64)),
        clamped=clamped,
        hit_epsilon=eps,
        cfg=cfg,
    )


def simulate_market(model: ModelSpec, x0, horizon: float, n_paths: int,
                    cfg: SimConfig, workers: int = 1) -> PathBatch:
    """Simulate the capitalization diffusion under the physical measure.

    States are kept strictly positive: output states are floored at the
    detection threshold (and such paths flagged, never absorbed); the
    ``full_truncation_euler`` scheme additionally clamps coefficient
    arguments at the threshold.
    """
    x0a = np.asarray(x0, dtype=np.float64).reshape(-1)
    if np.any(x0a <= 0):
        raise NonPositiveState(f"x0 must be strictly positive, got {x0a}")
    return _simulate(model, x0a, horizon, n_paths, cfg, "market", workers)


def simulate_auxiliary(model: ModelSpec, y0, horizon: float, n_paths: int,
                       cfg: SimConfig, workers: int = 1) -> PathBatch:
    """Simulate the auxiliary diffusion with orthant-boundary absorption.

    A path is absorbed at the first step where its smallest coordinate is at
    or below the detection threshold; ``hit_time`` records that step's time
    and the state stays frozen afterwards.  Weak uniqueness of the auxiliary
    dynamics is assumed, not checked.
    """
    y0a = np.asarray(y0, dtype=np.float64).reshape(-1)
    if np.any(y0a <= 0):
        raise NonPositiveState(f"y0 must be strictly positive, got {y0a}")
    return _simulate(model, y0a, horizon, n_paths, cfg, "auxiliary", workers)


def simulate_weights(model: ModelSpec, m0, horizon: float, n_paths: int,
                     cfg: SimConfig, workers: int = 1) -> PathBatch:
    """Simulate the driftless weight process on the open simplex.

    The volatility is evaluated at the weight-determined state, so this is the
    weight dynamics for models whose coefficients are functions of the weights
    alone.  States are renormalized to the simplex after every step; a path is
    absorbed when its smallest weight reaches the detection threshold.
    """
    m0a = np.asarray(m0, dtype=np.float64).reshape(-1)
    if m0a.shape[0] != model.n:
        raise SimplexViolation(f"m0 has {m0a.shape[0]} coordinates, model has {model.n}")
    if np.any(m0a <= 0) or abs(m0a.sum() - 1.0) > 1e-12:
        raise SimplexViolation(f"m0 must lie in the open simplex, got {m0a}")
    return _simulate(model, m0a, horizon, n_paths, cfg, "weights", workers)
