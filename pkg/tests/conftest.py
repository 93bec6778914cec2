import numpy as np
import pytest

from a2asr import tensor as T


@pytest.fixture(autouse=True)
def double_precision():
    """Tests run in float64 with an empty tape; training code may switch precision."""
    T.clear_tape()
    with T.precision("float64"):
        yield
    T.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
