import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scdm.labelmap import SemanticMap

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_map(rng, shape=(16, 16), num_classes=5, allow_mask=False) -> SemanticMap:
    hi = num_classes + 1 if allow_mask else num_classes
    return SemanticMap(rng.integers(0, hi, size=shape), num_classes)
