import numpy as np
import pytest

from msflow import fem
from msflow.field import CoefficientField, MobilityModel
from msflow.mesh import build_nested_grids, classify_vertices


@pytest.fixture(scope="session")
def bcs51():
    """Pressure drop left to right, no flow top and bottom."""
    return fem.BoundaryConditions.pressure_drop()


@pytest.fixture(scope="session")
def grid44():
    return build_nested_grids(4, 4, 4)


@pytest.fixture(scope="session")
def ones44(grid44):
    return CoefficientField(grid44, np.ones((grid44.Ny, grid44.Nx)))


@pytest.fixture(scope="session")
def classes44(grid44, bcs51):
    return classify_vertices(grid44.coarse, bcs51.layout())


@pytest.fixture(scope="session")
def quadratic_mobility():
    return MobilityModel()


@pytest.fixture(scope="session")
def linear_mobility():
    """Decoupled fluid model: constant total mobility, f(S) = S."""
    return MobilityModel(1.0, 1.0, k_rw=lambda s: s, k_ro=lambda s: 1.0 - s)
