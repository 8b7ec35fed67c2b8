import numpy as np
import pytest

from novscope import ScanDataset, generate_synthetic_domains


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_domains():
    """32x32 stripe twin with 8-pixel patches (625 candidates)."""
    return generate_synthetic_domains(32, 32, stripe_period=8.0, seed=1, patch_size=8)


@pytest.fixture(scope="session")
def tiny_dataset():
    """16x16 random twin with p=4 (169 candidates)."""
    r = np.random.default_rng(7)
    return ScanDataset(r.normal(size=(16, 16)), r.uniform(size=(16, 16)), patch_size=4)
