import numpy as np
import pytest
from hypothesis import settings

from isacsim.ofdm import PilotGrid, SystemConfig

# Invariant suites run on these seeds.
SEEDS = (0, 1, 2)

settings.register_profile("default", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("default")


@pytest.fixture
def small_cfg():
    return SystemConfig(n_subcarriers=16, n_cp=4, m_symbols=8, pilots=PilotGrid(4, 4))


@pytest.fixture
def reduced_cfg():
    return SystemConfig(n_subcarriers=256, n_cp=18, m_symbols=128)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
