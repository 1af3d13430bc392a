import numpy as np
import pytest
import torch

from gaisnet import data

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_scenes():
    return data.generate_dataset(6, data.SceneConfig(overlap_prob=0.7), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def overlap_train():
    """200 training scenes with overlap_prob 0.7."""
    return data.generate_dataset(200, data.SceneConfig(overlap_prob=0.7), seed=0)


@pytest.fixture(scope="session")
def overlap_test():
    """50 held-out scenes (ids 200..249) from the same generator settings."""
    return data.generate_dataset(50, data.SceneConfig(overlap_prob=0.7), seed=0, start_id=200)
