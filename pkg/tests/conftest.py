import numpy as np
import pytest

from bipartite_gan import engine as eng


@pytest.fixture(autouse=True, scope="session")
def _debug_checks():
    # Catch non-finite values at the op that produced them.
    eng.set_debug_checks(True)
    yield
    eng.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)
