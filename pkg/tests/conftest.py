import numpy as np
import pytest

from margincut.pipeline import CameraRig, build_cameras
from margincut.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def scene():
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def small_rig():
    return CameraRig(width=320, height=240, nir_width=320, nir_height=240)


@pytest.fixture(scope="session")
def cameras(scene, small_rig):
    return build_cameras(scene, small_rig)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
