import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vidpop.ingest import generate_synthetic


@pytest.fixture(scope="session")
def small_bundle():
    return generate_synthetic(seed=7, n_train=100, n_test=20)


@pytest.fixture(scope="session")
def tiny_dims():
    return {1: 6, 2: 6, 3: 6, 4: 6, 5: 8, 6: 8}


@pytest.fixture(scope="session")
def tiny_bundle(tiny_dims):
    return generate_synthetic(seed=11, n_train=60, n_test=12, dims=tiny_dims)
