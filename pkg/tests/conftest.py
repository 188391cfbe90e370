import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _torch_deterministic():
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
