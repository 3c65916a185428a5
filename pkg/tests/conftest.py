import numpy as np
import pytest

from blursplat.camera import CameraIntrinsics
from blursplat.lie import PoseSE3, Rotation
from blursplat.scene import SH_C0, GaussianScene


def random_scene(rng, n=20, scale_range=(0.03, 0.12), sh_degree=1, spread=0.6):
    means = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(-0.3, 0.3, n)]
    k = 4 if sh_degree == 1 else 1
    sh = rng.normal(0, 0.3, (n, k, 3))
    sh[:, 0] = rng.uniform(0.2, 0.8, (n, 3)) / SH_C0
    return GaussianScene(
        means,
        np.log(rng.uniform(*scale_range, (n, 3))),
        rng.normal(size=(n, 4)),
        rng.normal(0, 1.5, n),
        sh,
        sh_degree=sh_degree,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intr():
    return CameraIntrinsics.from_fov(32, 32, 60)


@pytest.fixture
def front_pose():
    # camera at z = -2.5 looking down +z toward the origin
    return PoseSE3(Rotation(), np.array([0.0, 0.0, -2.5]))
