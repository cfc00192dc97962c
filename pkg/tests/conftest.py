import numpy as np
import pytest

from gridcast.dataio import synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """One synthetic day on a 16x16 grid."""
    return synth_generate(0, 16, 16, 1)
