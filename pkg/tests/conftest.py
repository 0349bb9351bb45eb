import numpy as np
import pytest

from aploc.forward import build_spherical_grid, default_sensor_array, precompute_gain


@pytest.fixture(scope="session")
def sensors():
    return default_sensor_array()


@pytest.fixture(scope="session")
def small_space(sensors):
    """123-point lattice (60 mm radius, 20 mm spacing) under the 102-sensor cap."""
    return precompute_gain(build_spherical_grid(0.06, 0.02), sensors)


@pytest.fixture(scope="session")
def medium_space(sensors):
    """925-point lattice (30 mm radius, 5 mm spacing)."""
    return precompute_gain(build_spherical_grid(0.03, 0.005), sensors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, n, rank=None):
    rank = n if rank is None else rank
    X = rng.standard_normal((n, rank))
    return X @ X.T
