import os
import sys

import numpy as np
import pytest

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from grid_module import FieldState, SpatialGrid, TimeGrid  # noqa: E402
from problems_module import instantiate  # noqa: E402


@pytest.fixture
def ode_grid():
    return SpatialGrid.ode()


@pytest.fixture
def make_state():
    """FieldState from newest-first level values, ODE or PDE shaped."""
    def build(levels, step=1):
        return FieldState(values=np.array(levels, dtype=float), step=step)
    return build


@pytest.fixture
def problem():
    """Factory: problem(name, **params)."""
    def build(name, **params):
        return instantiate(name, params)
    return build


@pytest.fixture
def unit_time():
    """tau = 1 grid starting at 0."""
    return TimeGrid(t0=0.0, tau=1.0, steps=10)
