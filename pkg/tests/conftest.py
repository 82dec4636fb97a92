import os
from pathlib import Path

import numpy as np
import pytest

from ddpc_lab.models import ArxStructure, LtiSystem, PredictorTheta

RUN_SLOW = os.getenv("DDPC_RUN_SLOW") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long closed-loop and Monte Carlo checks, enabled by DDPC_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="set DDPC_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def fixtures_path():
    """Return the absolute path to the fixtures directory."""
    return Path(os.path.dirname(__file__)) / "fixtures"


@pytest.fixture
def load_fixture(fixtures_path):
    """Return a function that reads a fixture file as text."""
    def _load_fixture(filename):
        return (fixtures_path / filename).read_text()
    return _load_fixture


@pytest.fixture
def rng():
    """Generator for test data; independent of the streams the lab itself uses."""
    return np.random.default_rng(20240611)


@pytest.fixture
def benchmark_system():
    return LtiSystem.benchmark()


@pytest.fixture
def noise_free_system():
    return LtiSystem.benchmark(sigma_w2=0.0, sigma_v2=0.0)


@pytest.fixture
def random_theta(rng):
    """Return a factory for moderately scaled random ARX coefficients."""
    def _random_theta(structure: ArxStructure, scale: float = 0.5) -> PredictorTheta:
        values = rng.uniform(-1.0, 1.0, structure.n_theta)
        values[:structure.n_theta_y] *= scale / structure.na
        values[structure.n_theta_y:] *= scale
        return PredictorTheta(structure, values)
    return _random_theta
