import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def away_from_kinks(rng, shape, low=0.05, high=1.0):
    """Values with |x| in [low, high]: safe for +/-1e-4 FD stencils."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign
