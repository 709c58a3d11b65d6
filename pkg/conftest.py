import numpy as np
import pytest

from services.clifford_core import random_orthogonal
from services.geograph import random_geometric_graph


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def orthogonal(rng):
    """Random element of O(3), reflections included."""
    return random_orthogonal(3, rng)


@pytest.fixture
def make_graph(rng):
    def make(num_nodes=5, n=3, **kwargs):
        return random_geometric_graph(rng, num_nodes, n, **kwargs)

    return make
