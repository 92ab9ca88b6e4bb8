import numpy as np
import pytest

from partfusion.tuning import tune_allocator

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
