import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("efnet", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("efnet")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
