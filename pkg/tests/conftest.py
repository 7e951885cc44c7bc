import numpy as np
import pytest
import torch

from handface.data import SynthConfig, make_toy_models, synth_dataset


@pytest.fixture(scope="session")
def models():
    return make_toy_models()


@pytest.fixture(scope="session")
def small_dataset(models):
    return synth_dataset(models, SynthConfig(seed=3), 6, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
