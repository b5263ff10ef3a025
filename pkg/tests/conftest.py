"""Shared fixtures; this file also anchors sys.path for `import oracles`."""

import numpy as np
import pytest

from tva import FactorialDesign


@pytest.fixture
def design_33():
    return FactorialDesign((3, 3))


@pytest.fixture
def design_32():
    return FactorialDesign((3, 2))


@pytest.fixture
def design_553():
    return FactorialDesign((5, 5, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_design(rng, max_cells=256, max_arms=4, max_dosage=6):
    """A random design with at most ``max_cells`` cells."""
    while True:
        m = int(rng.integers(1, max_arms + 1))
        dosages = tuple(int(rng.integers(2, max_dosage + 1))
                        for _ in range(m))
        k = int(np.prod(dosages))
        if k <= max_cells:
            return FactorialDesign(dosages)
