import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.core.schemas import ModelConfig  # noqa: E402
from app.storage.volumes import Volume  # noqa: E402

RUN_SLOW = os.getenv("SHUFFLEUNET_RUN_SLOW") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs, enabled with SHUFFLEUNET_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set SHUFFLEUNET_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture()
def tiny_config():
    return ModelConfig(levels=2, base_filters=8, init_seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def smooth_volume():
    """Band-limited 32 x 32 x 16 volume built from low-frequency cosines"""
    shape = (32, 32, 16)
    x, y, z = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    voxels = (
        2.0
        + np.cos(2 * np.pi * 2 * x / shape[0])
        + 0.5 * np.sin(2 * np.pi * 3 * y / shape[1])
        + 0.25 * np.cos(2 * np.pi * 1 * z / shape[2])
    )
    return Volume(voxels.astype(np.float64), spacing=(1.75, 1.75, 2.35))
