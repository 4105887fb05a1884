import numpy as np
import pytest
import torch

from src.data import gen_signal_classes, gen_synthetic_classes
from src.dataset import SplitSpec, make_split
from src.modeling import TrainingConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_wafer():
    """3 classes x 40 wafer maps of 16x16."""
    return gen_synthetic_classes(num_classes=3, n_per_class=40, size=16, difficulty=0.2, seed=0)


@pytest.fixture
def tiny_signal():
    return gen_signal_classes(num_classes=3, n_per_class=30, signal_len=32, difficulty=0.2, seed=0)


@pytest.fixture
def fast_config():
    return TrainingConfig(epochs=2, batch_size=16, dropout=0.0)


@pytest.fixture
def tiny_split(tiny_wafer):
    return make_split(tiny_wafer, SplitSpec(n_labeled=12, n_test=30, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
