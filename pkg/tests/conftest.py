import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from octnet.data import generate_synthetic_fixture, scan_dataset


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    """8 train / 2 val / 2 test images per class at 150x150."""
    return generate_synthetic_fixture(tmp_path_factory.mktemp("fixture"), images_per_class=8, seed=3)


@pytest.fixture(scope="session")
def manifest(fixture_root):
    return scan_dataset(fixture_root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
