import numpy as np
import pytest

from kdcl.geometry import Angle, FleetState, RobotPose


@pytest.fixture
def rng():
    return np.random.default_rng(20230617)


def random_fleet(rng, n, box=5.0):
    vec = np.empty(4 * n)
    for i in range(n):
        vec[4 * i : 4 * i + 3] = rng.uniform(-box, box, 3)
        vec[4 * i + 3] = rng.uniform(-np.pi, np.pi)
    return FleetState.from_vector(vec)


def random_spd(rng, dim, scale=1.0):
    a = rng.normal(size=(dim, dim)) * scale
    return a @ a.T + 0.1 * scale**2 * np.eye(dim)


def make_pose(px, py, pz, yaw):
    return RobotPose(np.array([px, py, pz], dtype=float), Angle(yaw))
