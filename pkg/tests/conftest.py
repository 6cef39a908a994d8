import numpy as np
import pytest

from crossbrain import precision


@pytest.fixture(autouse=True)
def _restore_precision():
    """Keep precision changes from leaking across tests."""
    before = precision.active_precision()
    yield
    precision.set_precision(before)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
