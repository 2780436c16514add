import math

import numpy as np
import pytest

from geomrpp.world import ObstacleRect, WorldMap


def box_world(size=10.0, obstacles=(), resolution=0.05):
    """Square map with the given (cx, cy, length, width, angle) obstacles."""
    return WorldMap((0.0, 0.0, size, size), [ObstacleRect(*o) for o in obstacles], resolution)


def shapely_polygon(ob):
    from shapely.geometry import Polygon
    return Polygon([tuple(c) for c in ob.corners()])


@pytest.fixture
def empty_world():
    return box_world(10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def wrap_angle(a):
    return a % (2 * math.pi)
