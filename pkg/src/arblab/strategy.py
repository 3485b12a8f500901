"""Investment strategies and the pathwise backtester.

The optimal replicating strategy turns the solved arbitrage-quantity field
into portfolio weights

    pi_i(t) = X_i(t) D_i log U(T - t, X(t)) + X_i(t) / (X_1(t)+...+X_n(t)),

whose wealth, started from U(T, x0) times the market capitalization, tracks
X(t) U(T-t, X(t)) along paths.  On weight-form models the same strategy has a
functionally generated form in the market weights, which holds no cash.  The
classical long-only relative-arbitrage portfolios (entropy-weighted,
equal-weight blend, diversity-weighted) are provided for comparison.

Backtests advance wealth in arithmetic form, dV = V * pi' (dX_i / X_i), with
the *same* Brownian increments as the simulated market path (self-financing,
frictionless, zero interest).  Strategy callables are evaluated at recorded
grid times and held constant between records; they must accept batched states
``(t, X)`` with ``X`` of shape (B, n).
"""

from __future__ import annotations

import csv
import gzip
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng
from .errors import (
    ConfigInvalid,
    NonPositiveState,
    ParamInvalid,
    SimplexViolation,
    WealthNonPositive,
)
from .models import ModelSpec
from .pde import PdeSolution
from .sde import SimConfig, _record_steps, _resolve_epsilon, market_step

CLASSICAL_KINDS = ("market", "entropy", "ew_blend", "diversity_p")


@dataclass(frozen=True)
class StrategyWeights:
    """Fractions of wealth per asset; the remainder sits in the money market."""

    pi: np.ndarray

    @property
    def cash(self) -> float:
        return 1.0 - float(np.sum(self.pi))

    def __post_init__(self):
        if not np.all(np.isfinite(self.pi)):
            raise ParamInvalid(f"non-finite strategy weights {self.pi}")


def _check_simplex(mu: np.ndarray) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu <= 0) or abs(mu.sum() - 1.0) > 1e-9:
        raise SimplexViolation(f"weights must lie in the open simplex, got {mu}")
    return mu


# ---------------------------------------------------------------------------
# weight formulas
# ---------------------------------------------------------------------------

def optimal_weights(sol: PdeSolution, tau_remaining: float, x) -> StrategyWeights:
    """Replicating weights from the orthant solution's log-gradient."""
    if sol.kind != "orthant_U":
        raise ParamInvalid("optimal_weights needs an orthant-kind solution")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if np.any(x <= 0):
        raise NonPositiveState(f"x must be strictly positive, got {x}")
    q = sol.query(tau_remaining, x)
    pi = x * q["grad_log"] + x / x.sum()
    return StrategyWeights(pi=pi)


def fgp_weights(sol: PdeSolution, tau_remaining: float, mu) -> StrategyWeights:
    """Functionally generated form on the weight simplex (two assets).

    pi_i = mu_i (1 + D_i log Q - sum_j mu_j D_j log Q); sums to one exactly,
    so the strategy holds no cash.
    """
    if sol.kind != "simplex_Q":
        raise ParamInvalid("fgp_weights needs a simplex-kind solution")
    mu = _check_simplex(np.asarray(mu, dtype=np.float64).reshape(-1))
    if mu.shape[0] != 2:
        raise ParamInvalid("the weight-space solution covers two assets")
    q = sol.query(tau_remaining, mu[:1])
    g = float(q["grad_log"][0])
    pi = np.array([mu[0] * (1.0 + (1.0 - mu[0]) * g),
                   mu[1] * (1.0 - mu[0] * g)])
    return StrategyWeights(pi=pi)


def classical_weights(kind: str, mu, params: dict = None) -> StrategyWeights:
    """The classical relative-arbitrage portfolios on the open simplex."""
    params = params or {}
    mu = _check_simplex(np.asarray(mu, dtype=np.float64).reshape(-1))
    pi = _classical_pi(kind, mu[None, :], params)[0]
    return StrategyWeights(pi=pi)


def _classical_pi(kind: str, mu: np.ndarray, params: dict) -> np.ndarray:
    if kind == "market":
        return mu.copy()
    if kind == "entropy":
        c = params.get("c")
        if c is None or c <= 0:
            raise ParamInvalid("entropy portfolio needs c > 0")
        w = mu * (c - np.log(mu))
        return w / w.sum(axis=-1, keepdims=True)
    if kind == "ew_blend":
        c = params.get("c")
        if c is None or c <= 0:
            raise ParamInvalid("equal-weight blend needs c > 0")
        n = mu.shape[-1]
        geo = np.exp(np.log(mu).mean(axis=-1, keepdims=True))
        lam = 1.0 / (1.0 + geo / c)
        return lam / n + (1.0 - lam) * mu
    if kind == "diversity_p":
        p = params.get("p")
        if p is None or not (0.0 < p < 1.0):
            raise ParamInvalid("diversity portfolio needs p in (0, 1)")
        w = mu**p
        return w / w.sum(axis=-1, keepdims=True)
    raise ParamInvalid(f"unknown portfolio kind {kind!r}; choose from {CLASSICAL_KINDS}")


# ---------------------------------------------------------------------------
# strategy factories (batched callables for the backtester)
# ---------------------------------------------------------------------------

def classical_strategy(kind: str, **params) -> Callable:
    """Batched (t, X) -> pi callable applying a classical portfolio to the
    current market weights."""
    def strat(t, X):
        mu = X / X.sum(axis=-1, keepdims=True)
        return _classical_pi(kind, mu, params)
    return strat


def constant_strategy(pi) -> Callable:
    pi = np.asarray(pi, dtype=np.float64)

    def strat(t, X):
        return np.broadcast_to(pi, X.shape).copy()
    return strat


def replicating_strategy(sol: PdeSolution, T: float, clip_to_box: bool = True) -> Callable:
    """Optimal-arbitrage strategy fed by the orthant solution.

    With ``clip_to_box`` the query point is clipped into the solved box, so
    paths that wander past the truncation keep trading on the nearest solved
    values instead of aborting.
    """
    if sol.kind != "orthant_U":
        raise ParamInvalid("replicating_strategy needs an orthant-kind solution")
    lo = np.asarray(sol.grid.lower)
    hi = np.asarray(sol.grid.upper)

    def strat(t, X):
        tau = min(max(T - t, 0.0), float(sol.taus[-1]))
        Xq = np.clip(X, lo, hi) if clip_to_box else X
        q = sol.query(tau, Xq)
        return X * q["grad_log"] + X / X.sum(axis=-1, keepdims=True)
    return strat


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BacktestReport:
    """Pathwise wealth against the market, with replication and deflated-
    wealth diagnostics at the recorded times."""

    times: np.ndarray
    wealth: np.ndarray              # (n_paths, n_rec)
    market_wealth: np.ndarray       # (n_paths, n_rec)
    terminal_wealth: np.ndarray
    terminal_relative: np.ndarray
    arbitrage_frequency: float
    zv_mean: np.ndarray             # mean Z(t) V(t) / v0 per recorded time
    zv_stderr: np.ndarray
    replication_error: Optional[np.ndarray]   # (n_paths, n_rec) or None
    replication_mean: Optional[float]
    replication_max: Optional[float]
    cash_min: float
    cash_max: float
    min_weight: float
    path_seeds: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        d = {
            "n_paths": int(self.wealth.shape[0]),
            "horizon": float(self.times[-1]),
            "mean_terminal_wealth": float(self.terminal_wealth.mean()),
            "mean_terminal_relative": float(self.terminal_relative.mean()),
            "min_terminal_relative": float(self.terminal_relative.min()),
            "arbitrage_frequency": self.arbitrage_frequency,
            "max_zv_mean": float(np.max(self.zv_mean)),
            "zv_mean_terminal": float(self.zv_mean[-1]),
            "cash_min": self.cash_min,
            "cash_max": self.cash_max,
            "min_weight": self.min_weight,
        }
        if self.replication_mean is not None:
            d["replication_mean"] = self.replication_mean
            d["replication_max"] = self.replication_max
        return d

    def to_csv(self, path: str) -> None:
        """Per-path rows (path_id, t, V, V_market, replication_error)."""
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wt", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path_id", "t", "V", "V_market", "replication_error"])
            for p in range(self.wealth.shape[0]):
                for j, t in enumerate(self.times):
                    err = "" if self.replication_error is None \
                        else f"{self.replication_error[p, j]:.12g}"
                    writer.writerow([p, f"{t:.12g}", f"{self.wealth[p, j]:.17g}",
                                     f"{self.market_wealth[p, j]:.17g}", err])


def backtest(model: ModelSpec, strategy: Callable, v0: float, T: float,
             n_paths: int, cfg: SimConfig, sol: Optional[PdeSolution] = None,
             arb_tol: float = 0.0, workers: int = 1,
             x0=None) -> BacktestReport:
    """Advance strategy wealth along simulated market paths.

    The market path uses exactly the transitions of ``simulate_market`` for
    the same config, so backtests inherit the engine's determinism.  Wealth
    follows dV = V pi' (dX_i/X_i) with weights held constant between recorded
    times.  When ``sol`` is given, the replication identity against
    X(t) U(T-t, X(t)) is scored at each recorded time.

    ``x0`` defaults to the all-ones state.
    """
    if v0 <= 0:
        raise ConfigInvalid("v0 must be positive")
    x0 = np.ones(model.n) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(-1)
    if np.any(x0 <= 0):
        raise NonPositiveState(f"x0 must be strictly positive, got {x0}")
    cfg.check_horizon(T)
    eps = _resolve_epsilon(cfg, x0)
    if cfg.n_steps > 0 and eps >= float(np.min(x0)):
        raise ConfigInvalid("hit_epsilon must be below the smallest initial coordinate")

    n = model.n
    dt = cfg.dt
    sqrt_dt = math.sqrt(dt) if cfg.n_steps else 0.0
    full_trunc = cfg.scheme == "full_truncation_euler"
    rec_steps = _record_steps(cfg.n_steps, cfg.record_stride)
    n_rec = len(rec_steps)

    ids = np.arange(n_paths, dtype=np.uint64)
    keys = rng.path_keys(cfg.seed, ids)
    X = np.broadcast_to(x0, (n_paths, n)).astype(np.float64).copy()
    V = np.full(n_paths, float(v0))
    integ = np.zeros(n_paths)
    prev_k = np.asarray(model.deflator_k(np.maximum(X, eps) if full_trunc else X),
                        dtype=np.float64)

    wealth = np.empty((n_paths, n_rec))
    market = np.empty((n_paths, n_rec))
    zv = np.empty((n_paths, n_rec))
    repl = np.empty((n_paths, n_rec)) if sol is not None else None

    h0 = float(np.asarray(model.deflator_H(x0)))
    total0 = float(x0.sum())
    cash_min, cash_max, min_weight = np.inf, -np.inf, np.inf

    def take_record(slot: int, t: float):
        wealth[:, slot] = V
        market[:, slot] = v0 * X.sum(axis=1) / total0
        z = np.exp(h0 - np.asarray(model.deflator_H(X)) - integ)
        zv[:, slot] = z * V / v0
        if sol is not None:
            tau = max(T - t, 0.0)
            ref = X.sum(axis=1) * sol.value_at(min(tau, float(sol.taus[-1])),
                                               np.clip(X, sol.grid.lower, sol.grid.upper))
            repl[:, slot] = np.abs(V - ref) / ref

    def rebalance(t: float):
        nonlocal cash_min, cash_max, min_weight
        pi = np.asarray(strategy(t, X), dtype=np.float64)
        if pi.shape != X.shape or not np.all(np.isfinite(pi)):
            raise ConfigInvalid("strategy must return finite weights of shape (B, n)")
        sums = pi.sum(axis=1)
        cash_min = min(cash_min, float(1.0 - sums.max()))
        cash_max = max(cash_max, float(1.0 - sums.min()))
        min_weight = min(min_weight, float(pi.min()))
        return pi

    rec_ptr = 0
    take_record(0, 0.0)
    rec_ptr = 1
    pi = rebalance(0.0)

    for step in range(cfg.n_steps):
        z = rng.step_normals(keys, step, n)
        X_new, _ = market_step(model, X, z, dt, sqrt_dt, eps, full_trunc)
        ret = X_new / X - 1.0
        V = V * (1.0 + np.einsum("bi,bi->b", pi, ret))
        if np.any(V <= 0):
            bad = int(np.argmax(V <= 0))
            raise WealthNonPositive(
                f"wealth crossed zero at step {step + 1} on path {bad} "
                f"(path seed {int(keys[bad])})"
            )
        xa_new = np.maximum(X_new, eps) if full_trunc else X_new
        k_new = np.asarray(model.deflator_k(xa_new), dtype=np.float64)
        integ += 0.5 * dt * (prev_k + k_new)
        prev_k = k_new
        X = X_new
        if rec_ptr < n_rec and rec_steps[rec_ptr] == step + 1:
            t = (step + 1) * dt
            take_record(rec_ptr, t)
            rec_ptr += 1
            if step + 1 < cfg.n_steps:
                pi = rebalance(t)

    zv_mean = zv.mean(axis=0)
    zv_stderr = zv.std(axis=0, ddof=1) / math.sqrt(n_paths) if n_paths > 1 \
        else np.zeros(n_rec)
    terminal_rel = wealth[:, -1] / market[:, -1]
    freq = float(np.mean(wealth[:, -1] >= market[:, -1] - arb_tol))
    return BacktestReport(
        times=rec_steps * (dt if cfg.n_steps else 0.0),
        wealth=wealth,
        market_wealth=market,
        terminal_wealth=wealth[:, -1].copy(),
        terminal_relative=terminal_rel,
        arbitrage_frequency=freq,
        zv_mean=zv_mean,
        zv_stderr=zv_stderr,
        replication_error=repl,
        replication_mean=float(repl.mean()) if repl is not None else None,
        replication_max=float(repl.max()) if repl is not None else None,
        cash_min=float(cash_min),
        cash_max=float(cash_max),
        min_weight=float(min_weight),
        path_seeds=keys,
    )
