import numpy as np
import pytest

from mvgs.scene import make_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    """40 splats and 4 orbit cameras at 24x24; big enough to cover several tiles."""
    cloud, cams = make_synthetic(5, 40, 4, width=24, height=24)
    return cloud, cams
