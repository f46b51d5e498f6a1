import numpy as np
import pytest
from hypothesis import settings

from xspec import attention
from xspec.feature_store import Domain, FeatureMap

settings.register_profile("suite", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("suite")


def make_map(rng, patches=4, channels=8, domain=Domain.RGB, sample_id=0, label=-1, scale=1.0):
    data = (rng.standard_normal((patches, channels)) * scale).astype(np.float32)
    return FeatureMap(sample_id=sample_id, domain=domain, data=data, true_label=label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_params():
    return attention.init_params(c_in=8, c_out=4, seed=3)
