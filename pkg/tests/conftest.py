import numpy as np
import pytest

from adspoi.config import RunConfig


def small_config(**model) -> RunConfig:
    """The gradient-check scale used throughout the tests."""
    base = {"d_e": 12, "K": 2, "d_s": 6, "d_slot": 4, "d_dist": 4, "d_spatial": 5}
    base.update(model)
    return RunConfig().replace(model=base, objective={"n_neg": 8, "k_hard": 3},
                               optim={"dropout": 0.0, "batch_size": 8})


@pytest.fixture
def cfg() -> RunConfig:
    return small_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
