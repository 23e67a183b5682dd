import numpy as np
import pytest

from src.datasets.loaders import synthetic_dataset
from helpers import SMALL_PREP, make_sample


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_prep():
    return SMALL_PREP


@pytest.fixture
def bars():
    """60 noisy 16x16 two-class images"""
    return synthetic_dataset(60, class_count=2, size=16, seed=0)


@pytest.fixture
def bars3():
    return synthetic_dataset(60, class_count=3, size=16, seed=1)


@pytest.fixture
def sample(bars):
    return make_sample(bars)
