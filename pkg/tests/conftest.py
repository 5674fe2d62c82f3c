"""
Shared fixtures and the --runslow switch.
"""
import pytest

from rod_mechanics import WhiskerSpec
from scene_geometry import PolyObject


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def straight_spec():
    return WhiskerSpec(total_length=60.0, n_segments=30, distal_arc_length=0.0, distal_arc_radius=float("inf"))


@pytest.fixture
def whisker_spec():
    return WhiskerSpec()


@pytest.fixture
def square():
    return PolyObject([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]], name="square")
