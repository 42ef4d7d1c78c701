import numpy as np
import pytest

from tailbias.stats import LabelSpace, ingest


@pytest.fixture
def small_space() -> LabelSpace:
    return LabelSpace(num_object_classes=6, num_relations=4)


@pytest.fixture
def binary_space() -> LabelSpace:
    return LabelSpace(num_object_classes=2, num_relations=2)


@pytest.fixture
def skewed_stats(binary_space):
    # relation 1 is the head (90 samples), relation 2 the tail (10 samples)
    records = [(0, 1, 1)] * 90 + [(0, 1, 2)] * 10
    return ingest(records, binary_space)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
