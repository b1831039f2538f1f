import numpy as np
import pytest

from amrobust.lattice import Lattice, TimeGrid

GAP_DATES = (0.0, 0.25, 0.5, 0.75, 1.0)
GAP_PRE = -0.25

# 1 constant path plus 4 binomial-tail paths, +-0.2 steps after the mid date
GAP_PATHS = np.array([
    [1.0, 1.0, 1.0, 0.8, 0.6],
    [1.0, 1.0, 1.0, 0.8, 1.0],
    [1.0, 1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, 1.2, 1.0],
    [1.0, 1.0, 1.0, 1.2, 1.4],
])


@pytest.fixture(scope="session")
def gap_lattice() -> Lattice:
    grid = TimeGrid(GAP_DATES, pre_date=GAP_PRE)
    return Lattice.from_paths(grid, GAP_PATHS)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260823)
