import numpy as np
import pytest
import torch

torch.set_num_threads(1)

import yoularen as yr


@pytest.fixture(scope="session")
def plant():
    return yr.build_plant()


@pytest.fixture(scope="session")
def base_gain():
    return yr.CARTPOLE_ROBUST_GAIN


@pytest.fixture(scope="session")
def alpha_value(plant, base_gain):
    return yr.compute_alpha(plant, base_gain, grid_size=50)


@pytest.fixture(scope="session")
def gamma_value(alpha_value):
    return yr.gamma_from_alpha(alpha_value, margin=0.999)


def rng(seed=0):
    return np.random.default_rng(seed)
