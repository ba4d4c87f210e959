"""
Pytest configuration and fixtures.
"""

import os

import numpy as np
import pytest

from app.core.armed import ArmedLayout, LossWeights, TrainingConfig
from app.core.simdata import GeneratorConfig, generate


def pytest_addoption(parser):
    """Add custom command line options."""
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run long statistical and end-to-end tests",
    )


def pytest_configure(config):
    """Configure pytest."""
    config.addinivalue_line(
        "markers",
        "slow: long statistical / end-to-end runs (deselect with '-m \"not slow\"')",
    )


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless explicitly enabled."""
    if config.getoption("--run-slow") or os.environ.get("RUN_SLOW_TESTS") in ("1", "true"):
        return
    skip_slow = pytest.mark.skip(reason="Requires --run-slow or RUN_SLOW_TESTS=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data():
    """A tiny synthetic study: 6 sites (4 seen), about 20 rows each, 8 features."""
    cfg = GeneratorConfig(
        n_clusters=6,
        n_seen=4,
        samples_mean=20,
        samples_min=12,
        d_bio=3,
        k_informative=3,
        seed=7,
    )
    return generate(cfg)


@pytest.fixture
def fast_training():
    return TrainingConfig(epochs=3, lr=0.01, batch_size=16, fe_hidden=(4, 4))


@pytest.fixture
def weights():
    return LossWeights()


@pytest.fixture
def small_layout(small_data, fast_training):
    return ArmedLayout.from_training(
        small_data.n_features, small_data.Z.shape[1], fast_training
    )
