import numpy as np
import pytest

from sparselm.attention import mac_counter
from sparselm.tensor import instrumentation, settings


@pytest.fixture(autouse=True)
def _clean_counters():
    instrumentation.reset()
    mac_counter.reset()
    settings.deterministic = True
    settings.check_finite = False
    yield
    settings.check_finite = False


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
