import numpy as np
import pytest
from hypothesis import settings

from graspsim.hand import default_desk_hand
from graspsim.labelgen import make_labels
from graspsim.labels import sample_surface
from graspsim.sim import ObjectBody, Shape, SimConfig, Simulator

settings.register_profile("ci", deadline=None, derandomize=True)
settings.load_profile("ci")


def random_pose(rng):
    from graspsim.se3 import Pose, quat_from_rotvec
    w = rng.uniform(-np.pi, np.pi, 3)
    return Pose.from_parts(rng.uniform(-2.0, 2.0, 3), quat_from_rotvec(w))


@pytest.fixture(scope="session")
def model():
    return default_desk_hand()


@pytest.fixture(scope="session")
def sphere_shape():
    return Shape("sphere", radius=0.04)


@pytest.fixture(scope="session")
def sphere_points(sphere_shape):
    return sample_surface(sphere_shape)


@pytest.fixture
def sphere_object(sphere_shape):
    return ObjectBody(sphere_shape, mass=0.1, friction=0.8)


@pytest.fixture(scope="session")
def sim_config():
    return SimConfig()


@pytest.fixture(scope="session")
def simulator(model, sim_config):
    return Simulator(model, sim_config)


@pytest.fixture(scope="session")
def sphere_labels(model, sphere_shape, sphere_points):
    labels, failures = make_labels(model, sphere_shape, surface_height=0.0,
                                   count=4, seed=7, points=sphere_points)
    assert not failures, failures
    return labels
