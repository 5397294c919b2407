import numpy as np
import pytest

from taxapln.taxonomy import parse_lineages
from taxapln.toydata import make_toy_cohort


@pytest.fixture(scope="session")
def small_tree():
    """L=3 tree: layer_sizes (1, 2, 3)."""
    return parse_lineages(["A|a|x", "A|a|y", "A|b|z"])


@pytest.fixture(scope="session")
def toy_cohort():
    return make_toy_cohort(n=120, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
