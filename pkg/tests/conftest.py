import numpy as np
import pytest

from bilip import meshes


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def unit_mesh():
    return meshes.grid_mesh(0, 0, 1, 1, 8)
