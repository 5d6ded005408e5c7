import numpy as np
import pytest

from morphfit.model import synth_model


@pytest.fixture(scope="session")
def small_asset():
    return synth_model(3, (162, 6, 5))


@pytest.fixture(scope="session")
def asset():
    return synth_model(1, (642, 10, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
