import numpy as np
import pytest

from arblab import models


@pytest.fixture(scope="session")
def bessel3():
    return models.bessel3()


@pytest.fixture(scope="session")
def volstab2():
    return models.volatility_stabilized(2, zeta=1.0)


@pytest.fixture(scope="session")
def volstab3():
    return models.volatility_stabilized(3, zeta=1.0)


@pytest.fixture(scope="session")
def orthant_points():
    rng = np.random.default_rng(20240817)

    def make(n, count=1000, low=0.05, high=8.0):
        return rng.uniform(low, high, size=(count, n))

    return make


def radial3_oracle(x0: float, t: float, n_samples: int, seed: int):
    """Radial part of 3-D Brownian motion from (x0, 0, 0): exact samples of
    the single-asset Bessel-type capitalization at time t."""
    g = np.random.default_rng(seed).standard_normal((n_samples, 3))
    g *= np.sqrt(t)
    g[:, 0] += x0
    return np.linalg.norm(g, axis=1)


def mean_and_se(x: np.ndarray):
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(len(x)))
