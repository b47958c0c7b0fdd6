import numpy as np
import pytest

from softq_pretrain.data import generate_demos
from softq_pretrain.mdp import make_env
from softq_pretrain.soft import soft_value_iteration


@pytest.fixture(scope="session")
def grid():
    mdp, steps = make_env("grid5x5")
    q_star, _ = soft_value_iteration(mdp, 0.1, 0.97)
    return mdp, steps, q_star


@pytest.fixture(scope="session")
def grid_demos(grid):
    mdp, steps, q_star = grid
    return generate_demos(mdp, q_star, 0.1, 0.3, 2000, 123, steps)
