"""Monte Carlo estimators of the optimal arbitrage quantity u(T).

Two independent routes to the same number:

* exit probability — the fraction of auxiliary-diffusion paths that have not
  reached the orthant boundary by T;
* deflated value — the sample mean of the deflated terminal capitalization
  exp{H(x0) - H(X_T) - int_0^T k(X) dt} * (X_1(T)+...+X_n(T)) / (x_1+...+x_n)
  along market paths.

A third estimator returns the bare deflator expectation E[Z(T)], whose drop
below 1 certifies that the deflator is a strict local martingale.

Per-path functionals are assembled in log space: models whose deflated value
is constant along paths (e.g. the single-asset Bessel-type model) come out
bit-exact, and the overflow guard is a simple exponent test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .errors import OverflowGuard
from .models import ModelSpec, require_open_orthant
from .sde import PathBatch, SimConfig, simulate_auxiliary, simulate_market

_Z95 = 1.959963984540054           # two-sided 95% normal quantile
_LOG_OVERFLOW = math.log(1e300)

METHODS = ("exit_probability", "deflated_value", "deflator_expectation")


@dataclass(frozen=True)
class ExitEstimate:
    """A Monte Carlo estimate with its standard error and 95% interval."""

    value: float
    stderr: float
    ci_low: float
    ci_high: float
    n_paths: int
    method: str
    cfg_echo: dict

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "value": self.value,
            "stderr": self.stderr,
            "ci": [self.ci_low, self.ci_high],
            "n_paths": self.n_paths,
            **{k: self.cfg_echo[k] for k in ("dt", "hit_epsilon", "seed")},
        }


def _binomial_interval(successes: int, n: int) -> tuple[float, float, float, float]:
    """Point estimate, stderr, and 95% CI for a proportion.

    Normal interval in the bulk; Wilson score interval when the estimate is
    near the edges (below 0.1 or above 0.9), where the normal one misbehaves.
    """
    p = successes / n
    se = math.sqrt(p * (1.0 - p) / n)
    if 0.1 <= p <= 0.9:
        lo, hi = p - _Z95 * se, p + _Z95 * se
    else:
        z2 = _Z95**2
        denom = 1.0 + z2 / n
        center = (p + z2 / (2 * n)) / denom
        half = _Z95 * math.sqrt(p * (1.0 - p) / n + z2 / (4 * n**2)) / denom
        lo, hi = center - half, center + half
    return p, se, max(0.0, lo), min(1.0, hi)


def _mean_interval(w: np.ndarray, lower_clip: float = 0.0):
    value = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(len(w))) if len(w) > 1 else 0.0
    return value, se, max(lower_clip, value - _Z95 * se), value + _Z95 * se


def _echo(cfg: SimConfig, eps: float) -> dict:
    d = cfg.to_dict()
    d["hit_epsilon"] = eps
    return d


def estimate_exit_probability(model: ModelSpec, x0, T: float, n_paths: int,
                              cfg: SimConfig = None, workers: int = 1,
                              paths: Optional[PathBatch] = None) -> ExitEstimate:
    """P[auxiliary diffusion started at x0 stays in the open orthant past T].

    Pass a precomputed auxiliary ``paths`` batch to couple this estimate with
    other diagnostics; by default an independent batch is drawn.
    """
    require_open_orthant(x0, model.n)
    if cfg is None:
        cfg = SimConfig.for_horizon(T)
    if paths is None:
        paths = simulate_auxiliary(model, x0, T, n_paths, cfg, workers=workers)
    survived = np.isnan(paths.hit_time) | (paths.hit_time > T)
    p, se, lo, hi = _binomial_interval(int(survived.sum()), paths.n_paths)
    return ExitEstimate(p, se, lo, hi, paths.n_paths, "exit_probability",
                        _echo(paths.cfg, paths.hit_epsilon))


def _log_deflator(model: ModelSpec, x0: np.ndarray, paths: PathBatch) -> np.ndarray:
    h0 = float(np.asarray(model.deflator_H(x0)))
    return h0 - model.deflator_H(paths.terminal) - paths.terminal_integral


def estimate_deflated_value(model: ModelSpec, x0, T: float, n_paths: int,
                            cfg: SimConfig = None, workers: int = 1,
                            paths: Optional[PathBatch] = None) -> ExitEstimate:
    """Sample mean of the deflated terminal capitalization over market paths.

    Equals G(T, x0)/g(x0) for the killed expectation G; the run aborts if any
    per-path value would exceed 1e300.
    """
    x0 = require_open_orthant(x0, model.n).reshape(-1)
    if cfg is None:
        cfg = SimConfig.for_horizon(T)
    if paths is None:
        paths = simulate_market(model, x0, T, n_paths, cfg, workers=workers)
    log_w = (_log_deflator(model, x0, paths)
             + np.log(paths.terminal.sum(axis=1)) - math.log(x0.sum()))
    if np.any(log_w > _LOG_OVERFLOW):
        raise OverflowGuard(
            f"deflated value exceeds 1e300 on {(log_w > _LOG_OVERFLOW).sum()} paths"
        )
    value, se, lo, hi = _mean_interval(np.exp(log_w))
    return ExitEstimate(value, se, lo, hi, paths.n_paths, "deflated_value",
                        _echo(paths.cfg, paths.hit_epsilon))


def estimate_deflator_expectation(model: ModelSpec, x0, T: float, n_paths: int,
                                  cfg: SimConfig = None, workers: int = 1,
                                  paths: Optional[PathBatch] = None) -> ExitEstimate:
    """E[Z(T)]: the deflator expectation, strictly below 1 for strict local
    martingale deflators."""
    x0 = require_open_orthant(x0, model.n).reshape(-1)
    if cfg is None:
        cfg = SimConfig.for_horizon(T)
    if paths is None:
        paths = simulate_market(model, x0, T, n_paths, cfg, workers=workers)
    log_z = _log_deflator(model, x0, paths)
    if np.any(log_z > _LOG_OVERFLOW):
        raise OverflowGuard(
            f"deflator exceeds 1e300 on {(log_z > _LOG_OVERFLOW).sum()} paths"
        )
    value, se, lo, hi = _mean_interval(np.exp(log_z))
    return ExitEstimate(value, se, lo, hi, paths.n_paths, "deflator_expectation",
                        _echo(paths.cfg, paths.hit_epsilon))


def estimate_all(model: ModelSpec, x0, T: float, n_paths: int,
                 cfg: SimConfig = None, workers: int = 1) -> dict:
    """Run all three estimators on independent batches (seeds offset per
    method) and tabulate pairwise joint-sigma distances."""
    if cfg is None:
        cfg = SimConfig.for_horizon(T)
    results = {}
    for offset, fn in enumerate((estimate_exit_probability,
                                 estimate_deflated_value,
                                 estimate_deflator_expectation)):
        sub = SimConfig(dt=cfg.dt, n_steps=cfg.n_steps, scheme=cfg.scheme,
                        seed=(cfg.seed + offset) % 2**64,
                        hit_epsilon=cfg.hit_epsilon,
                        record_stride=cfg.record_stride)
        est = fn(model, x0, T, n_paths, sub, workers=workers)
        results[est.method] = est
    return {
        "estimates": {k: v.to_dict() for k, v in results.items()},
        "agreement": agreement_table(
            [results["exit_probability"], results["deflated_value"]]
        ),
    }


def agreement_table(estimates: list[ExitEstimate]) -> list[dict]:
    """Pairwise |difference| in units of the joint standard error."""
    rows = []
    for i in range(len(estimates)):
        for j in range(i + 1, len(estimates)):
            a, b = estimates[i], estimates[j]
            joint = math.hypot(a.stderr, b.stderr)
            delta = abs(a.value - b.value)
            rows.append({
                "a": a.method,
                "b": b.method,
                "delta": delta,
                "joint_sigma": joint,
                "sigmas_apart": delta / joint if joint > 0 else
                (0.0 if delta == 0 else math.inf),
            })
    return rows
