"""Shared fixtures: bundled parameters, a small dataset, a small trained model."""

import pytest

from battwin.cycles import build_dataset
from battwin.params import default_parameters
from battwin.surrogate import TrainConfig, train


@pytest.fixture(scope="session")
def params():
    return default_parameters()


@pytest.fixture(scope="session")
def small_dataset(params):
    # 3 train + 2 test cycles, short windows so at least one cycle fails
    return build_dataset(params, 3, 2, base_seed=100, n_windows=12)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    cfg = TrainConfig(epochs=3, batch_size=16, seed=11)
    weights, history = train(small_dataset, cfg)
    return weights, history
