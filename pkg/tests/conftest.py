import os

import numpy as np
import pytest

from config import SystemParams
from services.scene_trace import ScenePose, SceneTrace, synth_trace

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data")


@pytest.fixture
def sample_bvh_path():
    return os.path.join(DATA_DIR, "sample_motion.bvh")


@pytest.fixture
def params():
    return SystemParams()


@pytest.fixture
def two_user_params():
    return SystemParams(users=2, slots=5)


@pytest.fixture
def short_trace():
    return synth_trace(users=5, slots=4, seed=11)


def facing_pair_trace(slots=3):
    """Two users facing each other: each sees the other at level 3."""
    poses = [ScenePose(0, [2.0, 5.0], [1.0, 0.0]), ScenePose(1, [8.0, 5.0], [-1.0, 0.0])]
    return SceneTrace(slots=[list(poses) for _ in range(slots)], bounds=(10.0, 10.0))


@pytest.fixture
def facing_pair():
    return facing_pair_trace()


def uniform_raw(users, value=0.5):
    return np.full(6 * users, value)
