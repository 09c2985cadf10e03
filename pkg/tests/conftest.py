import dataclasses
import os

# Pin the kernel backend before any refgrid import so every frozen expected
# value in the suite is computed by the same implementation on every machine.
os.environ.setdefault("RGIN_BACKEND", "numpy")

import numpy as np
import pytest

from refgrid.config import RunConfig
from refgrid.data import generate_dataset


def tiny_config(**over):
    """Full-size canvas, small model: the cheap config used across tests."""
    base = dict(
        channels=(4, 6, 8, 8), feat_ch=8, fused_dim=12,
        text_dim=10, embed_dim=6, attn_dim=6, heads=2, num_priors=2,
        batch_size=4, n_train=12, n_val=6, n_test=6, seed=4,
        max_epochs=2, patience=5,
    )
    base.update(over)
    return RunConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A generated dataset shared by tests that only read it."""
    root = tmp_path_factory.mktemp("tinydata")
    cfg = tiny_config()
    generate_dataset(cfg, str(root))
    return str(root), cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def replace_cfg(cfg, **over):
    return dataclasses.replace(cfg, **over).validate()
