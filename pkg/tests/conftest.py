import numpy as np
import pytest
import torch

from bridgereid import Split, synthesize_toy_dataset


@pytest.fixture(scope="session")
def toy_train():
    return synthesize_toy_dataset(8, 4, 48, 24, seed=3, split=Split.TRAIN)


@pytest.fixture(scope="session")
def toy_query():
    return synthesize_toy_dataset(8, 3, 48, 24, seed=3, split=Split.QUERY)


@pytest.fixture(scope="session")
def toy_gallery():
    return synthesize_toy_dataset(8, 3, 48, 24, seed=3, split=Split.GALLERY)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
