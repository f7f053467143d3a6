import numpy as np
import pytest

from robust_bc.envsim import TabularMDP, expert_policy, make_env


@pytest.fixture(scope="session")
def grid():
    return make_env("gridworld5")


@pytest.fixture(scope="session")
def grid_expert(grid):
    return expert_policy(grid, 0.0)


def single_state_mdp(rewards, gamma=0.9):
    r = np.array([rewards], dtype=float)
    n_actions = r.shape[1]
    return TabularMDP(np.ones((1, n_actions, 1)), r, gamma, np.array([1.0]))


def random_mdp(rng, n_states=6, n_actions=3, gamma=0.9):
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(0, 1, size=(n_states, n_actions))
    return TabularMDP(P, R, gamma, rng.dirichlet(np.ones(n_states)))
