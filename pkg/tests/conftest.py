import numpy as np
import pytest

from kvrefresh.model import canonical_config, init_model


@pytest.fixture(scope="session")
def desk_config():
    return canonical_config(seed=1234)


@pytest.fixture(scope="session")
def desk_weights(desk_config):
    return init_model(desk_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
