import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stagmark.libraries import load_library
from stagmark.render import CameraIntrinsics, MarkerPlacement, NoiseSpec, look_at_pose, render_scene

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def lib11():
    return load_library(11)


@pytest.fixture(scope="session")
def lib19():
    return load_library(19)


@pytest.fixture(scope="session")
def lib23():
    return load_library(23)


@pytest.fixture(scope="session")
def vga():
    return CameraIntrinsics.for_image(640, 480)


def scene_at(lib, marker_id=0, angle=0.0, distance=4.0, noise=NoiseSpec(), axis="y", roll=0.0,
             size=(640, 480), background="flat"):
    cam = CameraIntrinsics.for_image(*size)
    R, t = look_at_pose(angle, distance, axis=axis, roll_deg=roll)
    return render_scene([MarkerPlacement(lib, marker_id, R, t)], cam, size, noise, background=background)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
