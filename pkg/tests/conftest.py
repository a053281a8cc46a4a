import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from depad.synthetic import load_zoo

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def zoo():
    return load_zoo()


@pytest.fixture
def write_text(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
