import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny_scenes():
    from wpsseg.datagen import generate_split

    return generate_split(16, 3, 0, size=32, num_classes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
