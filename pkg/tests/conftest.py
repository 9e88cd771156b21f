import numpy as np
import pytest

from actionimage.skeleton import SkeletonSequence


def random_sequence(rng, n=None, actors=1, joints=None, label=0):
    n = n or int(rng.integers(1, 30))
    joints = joints or int(rng.integers(2, 26))
    coords = rng.normal(0.0, 1.0, size=(n, actors, joints, 3)) * rng.uniform(0.1, 5.0)
    return SkeletonSequence(coords, label=label, source_id="rand")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
