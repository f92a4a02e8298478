import logging
import os

import numpy as np
import pytest

os.environ.setdefault("MATGAN_LOG_DIR", os.path.join(os.path.dirname(__file__), "..", "logs"))

import matgan_logger as _mlog
from style_gan3d import ModelConfig

# bind the console handler to the session stream, not a per-test capture
_mlog.setup(console_level=logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest useful model: 16³ output, narrow channels, short mapping network."""
    return ModelConfig(latent_dim=8, mapping_layers=2, output_size=16, channel_divisor=32, pack_size=2)


def cube(size=8, lo=3, hi=5):
    data = np.zeros((size, size, size), dtype=np.float32)
    data[lo:hi, lo:hi, lo:hi] = 1.0
    return data


def random_blob(rng, size=12, voxels=40):
    """6-connected blob grown by a random walk from the grid center."""
    data = np.zeros((size, size, size), dtype=np.float32)
    pos = np.array([size // 2] * 3)
    steps = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    data[tuple(pos)] = 1.0
    while data.sum() < voxels:
        pos = np.clip(pos + steps[rng.integers(6)], 0, size - 1)
        data[tuple(pos)] = 1.0
    return data
