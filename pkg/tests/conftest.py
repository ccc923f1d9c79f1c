import pytest

from multigrasp.dataset import SceneSample
from multigrasp.gripper import builtin_spec
from multigrasp.raster import rasterize_polygon

from tests.shapes import bar_polygon, disc_polygon

SCENE = 224


@pytest.fixture(scope="session")
def parallel_jaw():
    return builtin_spec("parallel_jaw")


@pytest.fixture(scope="session")
def radial3():
    return builtin_spec("radial3")


@pytest.fixture(scope="session")
def radial4():
    return builtin_spec("radial4")


@pytest.fixture(scope="session")
def bar_crop():
    """96x96 object crop with a 60x20 bar through the center."""
    return rasterize_polygon(bar_polygon(48, 48), 96, 96)


@pytest.fixture(scope="session")
def bar_scene():
    mask = rasterize_polygon(bar_polygon(112, 112), SCENE, SCENE)
    return SceneSample("bar", mask, ((112.0, 112.0),))


@pytest.fixture(scope="session")
def disc_scene():
    mask = rasterize_polygon(disc_polygon(112, 112, 16), SCENE, SCENE)
    return SceneSample("disc", mask, ((112.0, 112.0),))
