"""Numerical laboratory for optimal relative arbitrage in Markovian equity
markets: simulation, Monte Carlo and PDE estimation of the optimal arbitrage
quantity, strategy synthesis, and pathwise backtesting."""

from . import errors, exitmc, models, pde, rng, sde, strategy

__all__ = ["errors", "exitmc", "models", "pde", "rng", "sde", "strategy"]
__version__ = "0.1.0"
