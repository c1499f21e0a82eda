import numpy as np
import pytest

from scanreg.config import PipelineConfig
from scanreg.geometry import RigidTransform, rotation_from_axis_angle
from scanreg.synthetic import SceneConfig, generate_synthetic_scene


def random_transform(rng, angle_scale=1.0, trans_scale=1.0) -> RigidTransform:
    return RigidTransform(rotation_from_axis_angle(rng.normal(size=3) * angle_scale),
                          rng.normal(size=3) * trans_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def room_scene():
    """Noise-free 8-scan room with exact keypoint matches."""
    return generate_synthetic_scene(SceneConfig(scene="room", n_scans=8,
                                                overlap=0.6, seed=3))


@pytest.fixture(scope="session")
def small_scene():
    """Noise-free 4-scan room, cheap enough for per-test pipelines."""
    return generate_synthetic_scene(SceneConfig(scene="room", n_scans=4,
                                                overlap=0.6,
                                                points_per_scan=2500, seed=7))


@pytest.fixture(scope="session")
def fast_config():
    return PipelineConfig(seed=0, ransac_iterations=1000)
