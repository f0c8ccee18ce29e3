import numpy as np
import pytest
from hypothesis import settings

from dyadlab.grid import Lattice, ShiftedDyadicSystem
from dyadlab.haar import HaarBasis

settings.register_profile("dyadlab", max_examples=40, deadline=None)
settings.load_profile("dyadlab")


@pytest.fixture(scope="session")
def unit6():
    system = ShiftedDyadicSystem.standard(Lattice.unit(1, 6))
    return system, HaarBasis(system)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
