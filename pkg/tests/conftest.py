import sys
from pathlib import Path

import numpy as np
import pytest

from clusterscan.autodiff import set_precision

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def float64():
    """Tests run in the 64-bit oracle configuration unless they switch explicitly."""
    previous = set_precision(64)
    yield
    set_precision(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
