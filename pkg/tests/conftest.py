import numpy as np
import pytest

from maploc.geometry import Pose, exp_map


def random_twist(rng, rot_scale=1.0, trans_scale=1.0):
    rot = rng.uniform(-1.0, 1.0, 3)
    norm = np.linalg.norm(rot)
    if norm > 0:
        angle = rng.uniform(0.0, min(rot_scale, 3.0))
        rot = rot / norm * angle
    trans = rng.uniform(-trans_scale, trans_scale, 3)
    return np.concatenate([rot, trans])


def random_pose(rng, rot_scale=1.0, trans_scale=1.0) -> Pose:
    return exp_map(random_twist(rng, rot_scale, trans_scale))


@pytest.fixture
def rng():
    return np.random.default_rng(42)
