import numpy as np
import pytest

import cst.tensor as T


@pytest.fixture(autouse=True)
def _reset_default_dtype():
    """Keep the global storage dtype from leaking between tests."""
    yield
    T.set_default_dtype(np.float32)


@pytest.fixture
def f64():
    """Run the test in 64-bit storage (gradient-check precision)."""
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float32)
