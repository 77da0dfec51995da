import numpy as np
import pytest

from pforge.numerics import Rng


@pytest.fixture
def rng():
    return Rng(10)


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)
