import numpy as np
import pytest

from stead.tensor import set_debug

# every forward op asserts finite output while the suite runs
set_debug(True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def synthetic_splits(tmp_path_factory):
    """The frozen fixture: 100+100 training clips (seed 0) and 50+50 test clips (seed 1)."""
    from stead.data import generate_synthetic

    root = tmp_path_factory.mktemp("synthetic")
    train = generate_synthetic(root, 100, 100, seed=0, split="train")
    test = generate_synthetic(root, 50, 50, seed=1, split="test")
    return root, train, test
