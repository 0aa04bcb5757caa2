"""Shared fixtures: small trees, martingales and path ensembles"""

import numpy as np
import pytest

from components.filtration_tree import TreeFiltration, coin_martingale, random_martingale, random_tree
from components.montecarlo_paths import TimeGrid, bundled_spec, simulate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def binary_tree():
    return TreeFiltration.uniform(3, 2)


@pytest.fixture
def coin():
    return coin_martingale(depth=3, step=1.0)


@pytest.fixture
def random_setup(rng):
    """Depth-4 ternary tree with uneven probabilities and a random scalar martingale"""
    tree = random_tree(rng, 4, 3, "random")
    return tree, random_martingale(tree, rng, 0.5)


@pytest.fixture(scope="session")
def brownian_paths():
    return simulate(bundled_spec("brownian"), TimeGrid(0.0, 1.0, 64), 4_000, seed=11)


@pytest.fixture(scope="session")
def stopped_time_change_paths():
    spec = bundled_spec("stopped-time-change")
    grid = TimeGrid.with_step(0.0, 1.0 - 2.0 ** -6, 2.0 ** -9)
    return simulate(spec, grid, 20_000, seed=3), spec
