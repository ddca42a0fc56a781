import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_toy():
    from jnfvae.datasets import ToyConfig, generate_toy_dataset

    return generate_toy_dataset(ToyConfig(n_samples=256, seed=7))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
