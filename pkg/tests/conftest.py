import numpy as np
import pytest

from bhtomo.dynamics import RotationAxis, VelocityProfile
from bhtomo.geodesics import CameraSpec, IntegratorSettings, build_bundle


@pytest.fixture(scope="session")
def small_camera():
    return CameraSpec(view_direction=(0.2, -0.3, -0.93),
                      up_direction=(0.0, 1.0, 0.0),
                      image_pixels=8, field_half_width=11.0,
                      start_radius=40.0)


@pytest.fixture(scope="session")
def small_settings():
    return IntegratorSettings(rtol=1e-7, atol=1e-7, max_samples_per_ray=32,
                              region_of_interest=11.0)


@pytest.fixture(scope="session")
def small_bundle(small_camera, small_settings):
    return build_bundle(small_camera, small_settings)


@pytest.fixture(scope="session")
def tilted_axis():
    return RotationAxis((0.2, 0.1, 0.97))


@pytest.fixture(scope="session")
def kepler():
    return VelocityProfile()


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
