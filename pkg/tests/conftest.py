import numpy as np
import pytest

from refinpaint.core import Camera
from refinpaint.field import VoxelRadianceField


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def identity_camera(width=32, height=24, fx=30.0, fy=30.0):
    return Camera(
        width=width,
        height=height,
        fx=fx,
        fy=fy,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        c2w=np.eye(4),
    )


def random_field(rng, resolution=(8, 8, 8), bounds=((-1.0, -1.0, -3.0), (1.0, 1.0, -1.0)), scale=0.5):
    f = VoxelRadianceField(resolution, bounds)
    f.density[:] = rng.normal(0.0, scale, f.density.shape)
    f.sh[:] = rng.normal(0.0, scale, f.sh.shape)
    return f


@pytest.fixture
def small_field(rng):
    return random_field(rng)
