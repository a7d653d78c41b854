import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_kernels(rng, shape, k=13):
    """Random normalized kernels with a nonzero floor, shape (*shape, k, k)."""
    vals = rng.random(tuple(shape) + (k, k)) + 1e-3
    return vals / vals.sum(axis=(-2, -1), keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
