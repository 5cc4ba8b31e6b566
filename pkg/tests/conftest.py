import numpy as np
import pytest

from app.config import get_settings


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Each test reads PATHSPACE_* variables afresh"""
    for name in ("PATHSPACE_SEED", "PATHSPACE_OUT_DIR", "PATHSPACE_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
