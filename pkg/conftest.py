import mlx.core as mx
import numpy as np
import pytest

from mlx_handnerf.common.config import load_settings
from mlx_handnerf.dataset import toy_scene


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session", autouse=True)
def cpu_device():
    # float64 kernels are CPU-only
    mx.set_default_device(mx.cpu)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_settings(precision: str = "float64", **overrides):
    sections = {
        "encoding": {"position_degree": 4, "direction_degree": 2},
        "network": {
            "density_depth": 3,
            "density_width": 32,
            "density_skips": (1,),
            "color_depth": 1,
            "color_width": 16,
            "correction_depth": 2,
            "correction_width": 32,
            "latent_dim": 4,
            "feature_dim": 8,
        },
        "sampling": {"samples_per_hand": 8, "budget_fraction": 0.1, "chunk_size": 64},
        "train": {"iterations": 2, "log_every": 1, "val_every": 0, "checkpoint_every": 0},
        "numerics": {"precision": precision},
    }
    for section, values in overrides.items():
        sections.setdefault(section, {}).update(values)
    return load_settings(**sections)


@pytest.fixture
def settings64():
    return small_settings("float64")


@pytest.fixture
def settings32():
    return small_settings("float32")


@pytest.fixture(scope="session")
def one_hand_scene():
    return toy_scene(("right",), image_size=16, frames=2, train_cameras=2, test_cameras=1, novel_frames=1)


@pytest.fixture(scope="session")
def two_hand_scene():
    return toy_scene(("left", "right"), image_size=16, frames=1, train_cameras=2, test_cameras=1)
