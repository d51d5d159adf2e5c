import numpy as np
import pytest
import torch

from pivl.config import Config
from pivl import synthgen


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_config() -> Config:
    return Config().validate()


@pytest.fixture(scope="session")
def default_split(default_config):
    return synthgen.generate_dataset(default_config.data, seed=0)


@pytest.fixture(scope="session")
def quick_config() -> Config:
    """Short schedules for wiring tests; data/encoder defaults unchanged."""
    cfg = Config()
    cfg.train.stage1_id_epochs = 2
    cfg.train.stage1_part_epochs = 1
    cfg.train.stage2_epochs = 3
    return cfg.validate()


@pytest.fixture(scope="session")
def small_split(quick_config):
    """A reduced dataset for fast pipeline tests."""
    cfg = Config.from_dict(quick_config.to_dict())
    cfg.data.train_identities = 8
    cfg.data.test_identities = 4
    cfg.data.instances_per_identity = 4
    cfg.validate()
    return synthgen.generate_dataset(cfg.data, seed=1), cfg


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
