import numpy as np
import pytest

from portraitkit.cli import fixture_path
from portraitkit.diffusion import make_schedule
from portraitkit.oracle import load_model


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def gmm2d():
    return load_model(fixture_path("oracle", "gmm2d.json"))


@pytest.fixture(scope="session")
def two_mode():
    return load_model(fixture_path("oracle", "two_mode.json"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
