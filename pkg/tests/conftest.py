import os
from pathlib import Path

import numpy as np
import pytest

from augtransfer.models import Model

CACHE = Path(os.environ.get("AUGTRANSFER_CACHE", Path(__file__).parent / ".cache"))


@pytest.fixture(scope="session")
def desk():
    """Desk-scale dataset and trained zoo (cached between sessions)."""
    from augtransfer.desk import build_desk

    return build_desk(cache_dir=CACHE)


@pytest.fixture
def tiny_mlp():
    return Model.create("mlp", (3, 8, 8), 4, rng=0, hidden=(16, 8))


@pytest.fixture
def tiny_cnn():
    return Model.create("smallcnn", (3, 8, 8), 4, rng=1, channels=(4, 4))


@pytest.fixture
def images():
    gen = np.random.default_rng(0)
    return gen.uniform(0.1, 0.9, size=(3, 3, 8, 8))
