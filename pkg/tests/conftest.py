#!/usr/bin/env python3
"""
Test configuration and fixtures for progq
"""

import os
import shutil
import sys
import tempfile

import numpy as np
import pytest

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from progq.core import Codebook  # noqa: E402
from progq.datasets import make_synthetic  # noqa: E402
from progq.model import Hyperparameters, ProgressiveModel  # noqa: E402
from progq.supervised import ProjectionHead, SemanticLabelSet  # noqa: E402


@pytest.fixture(scope="session")
def test_data_dir():
    """Temporary directory shared by the session"""
    temp_dir = tempfile.mkdtemp(prefix="progq_test_")
    yield temp_dir
    shutil.rmtree(temp_dir, ignore_errors=True)


@pytest.fixture
def rng():
    """Seeded generator so every test draws the same numbers"""
    return np.random.default_rng(1234)


@pytest.fixture
def headless_model(rng):
    """Unsupervised model: 3 layers of 4 codewords in 5 dimensions, shrinking scales"""
    books = [Codebook(rng.standard_normal((4, 5)) * 0.5 ** l, l + 1) for l in range(3)]
    return ProgressiveModel.from_codebooks(books, Hyperparameters(L=3, K=4, E=5))


@pytest.fixture
def supervised_model(rng):
    """Model with a projection head: D=6 features, E=4 embedding, C=3 classes, L=2, K=4"""
    hyper = Hyperparameters(L=2, K=4, E=4, epochs=2, batch_size=4)
    sem = SemanticLabelSet.synthetic(3, 4, seed=3)
    head = ProjectionHead.initialize(6, 4, 3, rng)
    books = [Codebook(rng.standard_normal((4, 4)) * 0.5 ** l, l + 1) for l in range(2)]
    return ProgressiveModel(books, head, sem, hyper)


@pytest.fixture
def small_bundle():
    """Small well-separated mixture: 4 clusters x 30 points in 8 dimensions"""
    return make_synthetic(clusters=4, points_per_cluster=30, D=8, noise=0.05, seed=5, center_scale=2.0)


@pytest.fixture(autouse=True)
def setup_test_environment(monkeypatch):
    """Keep a developer's PROGQ_SEED out of the tests"""
    monkeypatch.delenv('PROGQ_SEED', raising=False)


def pytest_configure(config):
    """Configure pytest with custom markers"""
    config.addinivalue_line("markers", "unit: mark test as a unit test")
    config.addinivalue_line("markers", "integration: mark test as an integration test")
    config.addinivalue_line("markers", "slow: mark test as slow running")


def pytest_collection_modifyitems(config, items):
    """Add markers based on test location"""
    for item in items:
        path = str(item.fspath)
        if "unit" in path:
            item.add_marker(pytest.mark.unit)
        elif "integration" in path:
            item.add_marker(pytest.mark.integration)

        if "acceptance" in path or "benchmark" in item.name:
            item.add_marker(pytest.mark.slow)
