import numpy as np
import pytest
from hypothesis import settings

from partgraph.raster import ImageRaster

settings.register_profile("ci", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("ci")


def solid_image(h, w, color, image_id="solid"):
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:] = np.asarray(color, dtype=np.uint8)
    return ImageRaster(image_id, rgb)


def noise_image(h, w, seed, image_id=None):
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    return ImageRaster(image_id or f"noise{seed}", rgb)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
