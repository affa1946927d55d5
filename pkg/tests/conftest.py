import os

# Tests default to the numpy backend (faster on the 2-core CI box); run with
# PROTOPART_BACKEND=numba to exercise the jitted path everywhere. Backend
# agreement is covered explicitly in test_kernels.py either way.
os.environ.setdefault("PROTOPART_BACKEND", "numpy")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
