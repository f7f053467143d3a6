import dataclasses

import numpy as np
import pytest

from robust_bc.envsim import (GRIDWORLD5, PointMassEnv, TabularMDP, bellman_residual, chain_mdp,
                              default_horizon, estimate_return, exact_return, expert_policy,
                              gridworld_from_ascii, make_env, policy_evaluation, rollout,
                              stationary_visitation, value_iteration)
from robust_bc.errors import ConvergenceError, UnsupportedOperationError
from robust_bc.policy import TabularSoftmaxPolicy

from conftest import random_mdp, single_state_mdp


def test_tabular_mdp_validation():
    P = np.ones((1, 2, 1))
    with pytest.raises(ValueError):
        TabularMDP(P * 0.5, np.zeros((1, 2)), 0.9, np.array([1.0]))
    with pytest.raises(ValueError):
        TabularMDP(P, np.array([[2.0, 0.0]]), 0.9, np.array([1.0]))
    with pytest.raises(ValueError):
        TabularMDP(P, np.zeros((1, 2)), 0.9, np.array([0.5]))


def test_gridworld_layout(grid):
    assert grid.n_states == sum(row.count(".") for row in GRIDWORLD5)
    assert grid.n_actions == 4
    assert grid.reward.max() == 1.0
    np.testing.assert_allclose(grid.initial_dist, 1.0 / grid.n_states)


def test_gridworld_start_cell_and_walls():
    mdp = gridworld_from_ascii(["S.#", "..G"], gamma=0.9)
    assert mdp.initial_dist[0] == 1.0
    # moving up from the start bumps into the edge and stays put
    assert mdp.transition[0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        gridworld_from_ascii(["..x", "..G"])


def test_default_horizon_bounds_truncation():
    for gamma in (0.5, 0.9, 0.95, 0.99):
        h = default_horizon(gamma)
        assert gamma**h <= 1e-3 * (1 - gamma) < gamma ** (h - 1)


# value_iteration

def test_value_iteration_single_state():
    q, greedy = value_iteration(single_state_mdp([1.0, 0.0], gamma=0.9))
    np.testing.assert_allclose(q[0], [10.0, 9.0], atol=1e-8)
    assert greedy[0] == 0


def test_value_iteration_no_lookahead(rng=np.random.default_rng(3)):
    # gamma -> 0 leaves only the immediate reward
    mdp = dataclasses.replace(random_mdp(rng), gamma=1e-12)
    q, _ = value_iteration(mdp)
    np.testing.assert_allclose(q, mdp.reward, atol=1e-9)


def test_value_iteration_matches_linear_solve(grid):
    tol = 1e-10
    q, greedy = value_iteration(grid, tol)
    assert bellman_residual(grid, q) <= tol
    # independent oracle: (I - gamma P_pi) V = r_pi for the greedy policy
    idx = np.arange(grid.n_states)
    p_pi = grid.transition[idx, greedy]
    v = np.linalg.solve(np.eye(grid.n_states) - grid.gamma * p_pi, grid.reward[idx, greedy])
    q_oracle = grid.reward + grid.gamma * grid.transition @ v
    np.testing.assert_allclose(q, q_oracle, atol=1e-8)


def test_value_iteration_ties_to_smallest_action():
    _, greedy = value_iteration(single_state_mdp([1.0, 1.0, 0.0]))
    assert greedy[0] == 0


def test_value_iteration_reports_residual(grid):
    with pytest.raises(ConvergenceError, match="residual"):
        value_iteration(grid, tol=1e-12, max_iter=2)


def test_greedy_beats_random_policies(grid):
    rng = np.random.default_rng(0)
    best = exact_return(grid, expert_policy(grid, 0.0))
    for _ in range(100):
        pi = TabularSoftmaxPolicy(rng.normal(0, 3, size=(grid.n_states, grid.n_actions)))
        assert exact_return(grid, pi) <= best + 1e-9


def test_gridworld_expert_return_frozen(grid, grid_expert):
    # frozen from an independent linear solve of the greedy snake policy
    assert exact_return(grid, grid_expert) == pytest.approx(2.0881419937453085, abs=1e-9)


# expert_policy

def test_expert_softness_zero_is_greedy(grid, grid_expert):
    _, greedy = value_iteration(grid)
    probs = grid_expert.probs()
    np.testing.assert_array_equal(probs.argmax(axis=1), greedy)
    np.testing.assert_allclose(probs.max(axis=1), 1.0)


def test_expert_soft_single_state():
    pi = expert_policy(single_state_mdp([1.0, 0.0]), softness=1.0)
    # softmax(10, 9), hand-evaluated
    np.testing.assert_allclose(pi.probs()[0], [0.7310585786300049, 0.2689414213699951], atol=1e-8)


def test_expert_soft_argmax_converges_to_greedy(grid):
    _, greedy = value_iteration(grid)
    pi = expert_policy(grid, softness=1e-3)
    np.testing.assert_array_equal(pi.probs().argmax(axis=1), greedy)


def test_pointmass_expert_stabilizes():
    env = PointMassEnv(noise_std=0.0)
    traj = rollout(env, expert_policy(env, 0.0), horizon=300, seed=1)
    norms = np.linalg.norm(np.array(traj.states), axis=1)
    # oracle: closed-loop clipped LQR simulated directly
    k = env.lqr_gain()
    s = traj.states[0].copy()
    for t in range(1, 300):
        u = np.clip(-k @ s, -1, 1)
        s = env.dynamics_a @ s + env.dynamics_b @ u
        np.testing.assert_allclose(traj.states[t], s, atol=1e-12)
    # the closed loop is underdamped: the norm spirals in, so compare per-period maxima
    block_max = norms[: 280].reshape(4, 70).max(axis=1)
    assert np.all(np.diff(block_max) < 0)
    assert norms[-1] < 1e-3


# rollout / estimate_return

def test_rollout_chain_path():
    env = chain_mdp(8)
    right = TabularSoftmaxPolicy(np.log(np.tile([1e-300, 1.0], (8, 1))))
    traj = rollout(env, right, horizon=5, seed=0)
    assert traj.states == [0, 1, 2, 3, 4]
    assert traj.length == 5


def test_rollout_deterministic(grid):
    pi = TabularSoftmaxPolicy.uniform(grid.n_states, grid.n_actions)
    a, b = rollout(grid, pi, 50, seed=11), rollout(grid, pi, 50, seed=11)
    assert a.steps == b.steps


def test_rollout_visits_match_long_run_occupancy():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng, n_states=3, n_actions=3)
    pi = TabularSoftmaxPolicy.uniform(3, 3)
    traj = rollout(mdp, pi, 10_000, seed=2)
    freq = np.bincount(traj.states, minlength=3) / traj.length
    # an undiscounted rollout samples the gamma -> 1 occupancy
    exact = stationary_visitation(dataclasses.replace(mdp, gamma=1 - 1e-9), pi).sum(axis=1)
    assert np.abs(freq - exact).sum() < 0.02


def test_estimate_return_geometric_series():
    mean, std = estimate_return(single_state_mdp([1.0], gamma=0.5), TabularSoftmaxPolicy.uniform(1, 1),
                                n_trials=5, seed=0)
    assert mean == pytest.approx(2.0, abs=1e-3 * 2.0)
    assert std == 0.0


def test_estimate_return_single_trial(grid, grid_expert):
    mean, std = estimate_return(grid, grid_expert, n_trials=1, seed=4)
    child = np.random.SeedSequence(4).spawn(1)[0]
    traj = rollout(grid, grid_expert, default_horizon(grid.gamma), np.random.default_rng(child))
    assert mean == traj.discounted_return(grid.gamma)
    assert std == 0.0


def test_estimate_return_near_exact(grid):
    pi = TabularSoftmaxPolicy.random_init(grid.n_states, grid.n_actions, seed=1, scale=2.0)
    mean, std = estimate_return(grid, pi, n_trials=300, seed=9)
    assert abs(mean - exact_return(grid, pi)) <= 3 * std / np.sqrt(300)


def test_estimate_return_reproducible(grid):
    pi = TabularSoftmaxPolicy.uniform(grid.n_states, grid.n_actions)
    assert estimate_return(grid, pi, 7, seed=3) == estimate_return(grid, pi, 7, seed=3)
    env = make_env("pointmass")
    ex = expert_policy(env, 0.2)
    assert estimate_return(env, ex, 3, seed=1) == estimate_return(env, ex, 3, seed=1)


def test_estimate_return_rejects_short_horizon(grid, grid_expert):
    with pytest.raises(ValueError):
        estimate_return(grid, grid_expert, 2, horizon=10)


# stationary_visitation

def test_visitation_single_state():
    pi = TabularSoftmaxPolicy(np.array([[0.3, -1.0, 2.0]]))
    rho = stationary_visitation(single_state_mdp([0.1, 0.2, 0.3]), pi)
    np.testing.assert_allclose(rho[0], pi.probs()[0], atol=1e-12)


def test_visitation_tiny_gamma(grid):
    pi = TabularSoftmaxPolicy.random_init(grid.n_states, grid.n_actions, seed=0, scale=1.0)
    rho = stationary_visitation(dataclasses.replace(grid, gamma=1e-8), pi)
    np.testing.assert_allclose(rho, grid.initial_dist[:, None] * pi.probs(), atol=1e-6)


def test_visitation_power_series(grid):
    pi = TabularSoftmaxPolicy.uniform(grid.n_states, grid.n_actions)
    rho = stationary_visitation(grid, pi)
    p_pi = np.einsum("sa,sat->st", pi.probs(), grid.transition)
    d, acc = grid.initial_dist.copy(), np.zeros(grid.n_states)
    for t in range(2000):
        acc += (1 - grid.gamma) * grid.gamma**t * d
        d = d @ p_pi
    oracle = acc[:, None] * pi.probs()
    assert np.abs(rho - oracle).sum() < 1e-6


def test_visitation_flow_equation():
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng)
    pi = TabularSoftmaxPolicy.random_init(mdp.n_states, mdp.n_actions, seed=2, scale=1.0)
    rho = stationary_visitation(mdp, pi)
    assert rho.min() >= 0 and abs(rho.sum() - 1) < 1e-9
    inflow = (1 - mdp.gamma) * mdp.initial_dist + mdp.gamma * np.einsum("sa,sat->t", rho, mdp.transition)
    assert np.abs(rho.sum(axis=1) - inflow).max() < 1e-8


def test_visitation_rejects_continuous():
    env = PointMassEnv()
    with pytest.raises(UnsupportedOperationError):
        stationary_visitation(env, expert_policy(env, 0.0))


def test_policy_evaluation_chain():
    env = chain_mdp(4, gamma=0.9)
    right = TabularSoftmaxPolicy(np.log(np.tile([1e-300, 1.0], (4, 1))))
    v = policy_evaluation(env, right)
    np.testing.assert_allclose(v, [0.9**3 * 10, 0.9**2 * 10, 0.9 * 10, 10.0], atol=1e-9)


def test_env_json_roundtrip(tmp_path, grid):
    import json
    from robust_bc.envsim import load_env_config

    p = tmp_path / "g.json"
    p.write_text(json.dumps({"type": "gridworld", "map": list(GRIDWORLD5), "gamma": 0.95}))
    env = load_env_config(p)
    np.testing.assert_array_equal(env.transition, grid.transition)
    q = tmp_path / "t.json"
    q.write_text(json.dumps(grid.to_dict()))
    assert make_env(str(q)).n_states == grid.n_states
