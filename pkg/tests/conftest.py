import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure project root is on sys.path for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from latentchoice import config  # noqa: E402
from latentchoice.data_model import IndicatorVariable, SurveyDataset, VariableCatalog  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical checks that take tens of seconds (deselect with -m 'not slow')")


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    # every test gets its own registry and a fresh settings singleton
    for name in ("LOG_LEVEL", "RECORD_RUNS", "OUTPUT_DIR", "TRACE_WALL_TIME", "MAX_ENUMERATION_LATENTS", "N_JOBS"):
        monkeypatch.delenv(f"LATENTCHOICE_{name}", raising=False)
    monkeypatch.setenv("LATENTCHOICE_DATABASE_URL", f"sqlite:///{tmp_path / 'registry.db'}")
    config.get_settings.cache_clear()
    yield
    config.get_settings.cache_clear()


@pytest.fixture
def small_catalog():
    return VariableCatalog(
        alternatives=["car", "bus", "train"],
        reference="car",
        alt_specific_vars=["cost", "duration"],
        generic_vars=["x1", "x2", "x3", "x4"],
        indicators=[
            IndicatorVariable(name="comfort_car", alternative="car"),
            IndicatorVariable(name="comfort_train", alternative="train"),
            IndicatorVariable(name="safety_bus", alternative="bus"),
            IndicatorVariable(name="safety_train", alternative="train"),
        ],
    )


def _random_dataset(catalog, n, seed=0, with_indicators=True):
    rng = np.random.default_rng(seed)
    n_alt = catalog.n_alternatives
    attributes = rng.uniform(0.0, 1.0, (n, n_alt, len(catalog.alt_specific_vars)))
    generic = (rng.random((n, len(catalog.generic_vars))) < 0.5).astype(float)
    availability = np.ones((n, n_alt), dtype=bool)
    choice = rng.integers(0, n_alt, n)
    if with_indicators:
        indicators = (rng.random((n, len(catalog.indicators))) < 0.5).astype(float)
    else:
        indicators = np.full((n, len(catalog.indicators)), np.nan)
    return SurveyDataset(catalog, attributes, generic, choice, availability, indicators)


@pytest.fixture
def small_dataset(small_catalog):
    return _random_dataset(small_catalog, 200, seed=3)


@pytest.fixture
def make_dataset():
    return _random_dataset
