import numpy as np
import pytest

from caveloco.calibration import generate_board
from caveloco.geometry import CaveLayout, default_cameras


@pytest.fixture(scope="session")
def layout():
    return CaveLayout.default()


@pytest.fixture(scope="session")
def cameras(layout):
    return default_cameras(layout)


@pytest.fixture(scope="session")
def markers(layout):
    return generate_board(layout, 9, 0.4, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
