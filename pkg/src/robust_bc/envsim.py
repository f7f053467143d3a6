"""Desk-scale environments with exactly solvable experts.

Two families live here: finite MDPs (``TabularMDP``, including ASCII
gridworlds) and a clipped double-integrator ``PointMassEnv``.  Both expose
the small surface the rest of the package needs: an initial-state sampler,
a step function, a discount factor and a bounded reward.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConvergenceError, UnsupportedOperationError

# Gridworld moves, indexed by action: up, right, down, left.
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))

GRIDWORLD5 = (
    ".....",
    "####.",
    ".....",
    ".####",
    "....G",
)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def default_horizon(gamma: float) -> int:
    """Smallest H with gamma**H <= 1e-3 * (1 - gamma)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    target = 1e-3 * (1.0 - gamma)
    h = max(1, math.ceil(math.log(target) / math.log(gamma)))
    while gamma ** (h - 1) <= target and h > 1:
        h -= 1
    while gamma**h > target:
        h += 1
    return h


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    gamma: float
    initial_dist: np.ndarray  # (S,)
    r_max: float = 1.0
    terminal: np.ndarray | None = None  # optional (S,) bool; rollouts stop there
    name: str = "tabular"
    cells: tuple | None = None  # grid coordinates of each state, gridworlds only

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        mu0 = np.asarray(self.initial_dist, dtype=np.float64)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", mu0)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A = P.shape[:2]
        if r.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {r.shape}")
        if mu0.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}, got {mu0.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-9:
            raise ValueError("every transition row must be a probability vector")
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > 1e-9:
            raise ValueError("initial_dist must be a probability vector")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if np.any(r < 0) or np.any(r > self.r_max):
            raise ValueError(f"rewards must lie in [0, {self.r_max}]")
        if self.terminal is not None:
            term = np.asarray(self.terminal, dtype=bool)
            object.__setattr__(self, "terminal", term)
            for s in np.flatnonzero(term):
                if np.any(r[s] != 0) or np.any(P[s, :, s] != 1.0):
                    raise ValueError(f"terminal state {s} must be absorbing with zero reward")
        P.setflags(write=False)
        r.setflags(write=False)
        mu0.setflags(write=False)
        # cumulative tables make sampling a single searchsorted call
        object.__setattr__(self, "_cum_P", np.cumsum(P, axis=2))
        object.__setattr__(self, "_cum_mu0", np.cumsum(mu0))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def is_tabular(self) -> bool:
        return True

    def reset(self, rng: np.random.Generator) -> int:
        return _draw(self._cum_mu0, rng)

    def step(self, state: int, action: int, rng: np.random.Generator) -> tuple[int, float]:
        return _draw(self._cum_P[state, action], rng), float(self.reward[state, action])

    def is_terminal(self, state) -> bool:
        return self.terminal is not None and bool(self.terminal[state])

    def to_dict(self) -> dict:
        return {
            "type": "tabular",
            "name": self.name,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
            "r_max": self.r_max,
        }


def _draw(cum: np.ndarray, rng: np.random.Generator) -> int:
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(i, len(cum) - 1)


def gridworld_from_ascii(rows: Sequence[str], gamma: float = 0.95, slip: float = 0.0,
                         name: str = "gridworld") -> TabularMDP:
    """Build a gridworld MDP from an ASCII map.

    ``.`` is a free cell, ``#`` a wall, ``G`` a goal and ``S`` a start cell.
    Stepping into a goal pays reward 1 and restarts the agent from the
    initial distribution, so goal cells are not states themselves.  Without
    any ``S`` cell the initial distribution is uniform over free cells.
    With ``slip > 0`` the intended move is replaced by a uniformly random
    one with that probability.
    """
    rows = [r.strip() for r in rows if r.strip()]
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("gridworld map rows must have equal length")
    bad = {c for r in rows for c in r} - set(".#GS")
    if bad:
        raise ValueError(f"unknown map characters: {sorted(bad)}")
    cells = [(i, j) for i, r in enumerate(rows) for j, c in enumerate(r) if c in ".S"]
    goals = {(i, j) for i, r in enumerate(rows) for j, c in enumerate(r) if c == "G"}
    if not cells:
        raise ValueError("gridworld map has no free cells")
    if not goals:
        raise ValueError("gridworld map needs at least one goal cell 'G'")
    index = {c: k for k, c in enumerate(cells)}
    S, A = len(cells), len(MOVES)

    starts = [index[(i, j)] for i, r in enumerate(rows) for j, c in enumerate(r) if c == "S"]
    mu0 = np.zeros(S)
    mu0[starts if starts else slice(None)] = 1.0
    mu0 /= mu0.sum()

    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s, (i, j) in enumerate(cells):
        for a in range(A):
            outcomes = [(1.0 - slip, a)] + [(slip / A, k) for k in range(A)]
            for p, move in outcomes:
                if p == 0.0:
                    continue
                di, dj = MOVES[move]
                ni, nj = i + di, j + dj
                if (ni, nj) in goals:
                    R[s, a] += p
                    P[s, a] += p * mu0
                elif (ni, nj) in index:
                    P[s, a, index[(ni, nj)]] += p
                else:
                    P[s, a, s] += p
    return TabularMDP(P, R, gamma, mu0, r_max=1.0, name=name, cells=tuple(cells))


def chain_mdp(n: int, gamma: float = 0.9) -> TabularMDP:
    """Deterministic chain: start at 0, action 1 moves right, 0 moves left.

    The right end is absorbing and pays reward 1 per step.
    """
    if n < 2:
        raise ValueError("chain needs at least two states")
    P = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    for s in range(n):
        if s == n - 1:
            P[s, :, s] = 1.0
            R[s] = 1.0
            continue
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, s + 1] = 1.0
    mu0 = np.zeros(n)
    mu0[0] = 1.0
    return TabularMDP(P, R, gamma, mu0, name=f"chain{n}")


@dataclass(frozen=True, eq=False)
class PointMassEnv:
    """Noisy double integrator with actions clipped to [-1, 1].

    Reward is exp(-|s|^2), so it stays inside (0, 1].
    """

    dt: float = 0.1
    noise_std: float = 0.0
    gamma: float = 0.95
    init_scale: float = 1.0
    action_low: float = -1.0
    action_high: float = 1.0
    dynamics_a: np.ndarray = field(default=None)
    dynamics_b: np.ndarray = field(default=None)
    name: str = "pointmass"

    def __post_init__(self):
        if self.dynamics_a is None:
            object.__setattr__(self, "dynamics_a", np.array([[1.0, self.dt], [0.0, 1.0]]))
        if self.dynamics_b is None:
            object.__setattr__(self, "dynamics_b", np.array([[0.5 * self.dt**2], [self.dt]]))
        a = np.asarray(self.dynamics_a, dtype=np.float64)
        b = np.asarray(self.dynamics_b, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
            raise ValueError("dynamics_a must be square and dynamics_b must match its rows")
        object.__setattr__(self, "dynamics_a", a)
        object.__setattr__(self, "dynamics_b", b)
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def state_dim(self) -> int:
        return self.dynamics_a.shape[0]

    @property
    def action_dim(self) -> int:
        return self.dynamics_b.shape[1]

    @property
    def r_max(self) -> float:
        return 1.0

    @property
    def is_tabular(self) -> bool:
        return False

    def reward_of(self, state: np.ndarray) -> float:
        return float(np.exp(-np.dot(state, state)))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.init_scale, self.init_scale, size=self.state_dim)

    def step(self, state, action, rng: np.random.Generator):
        u = np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)
        nxt = self.dynamics_a @ state + self.dynamics_b @ u
        if self.noise_std > 0:
            nxt = nxt + rng.normal(0.0, self.noise_std, size=self.state_dim)
        return nxt, self.reward_of(state)

    def is_terminal(self, state) -> bool:
        return False

    def lqr_gain(self, state_cost: float = 1.0, action_cost: float = 1.0,
                 tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
        """Discounted discrete-time LQR gain K (u = -K s) by Riccati iteration."""
        A, B = self.dynamics_a, self.dynamics_b
        Q = state_cost * np.eye(self.state_dim)
        R = action_cost * np.eye(self.action_dim)
        g = self.gamma
        X = Q.copy()
        for _ in range(max_iter):
            K = np.linalg.solve(R + g * B.T @ X @ B, g * B.T @ X @ A)
            X_new = Q + g * A.T @ X @ A - g * A.T @ X @ B @ K
            if np.max(np.abs(X_new - X)) <= tol * max(1.0, np.max(np.abs(X))):
                X = X_new
                break
            X = X_new
        else:
            raise ConvergenceError("Riccati iteration did not converge")
        return np.linalg.solve(R + g * B.T @ X @ B, g * B.T @ X @ A)

    def to_dict(self) -> dict:
        return {
            "type": "pointmass",
            "name": self.name,
            "dt": self.dt,
            "noise_std": self.noise_std,
            "gamma": self.gamma,
            "init_scale": self.init_scale,
        }


@dataclass
class Trajectory:
    states: list
    actions: list
    rewards: list
    horizon: int

    @property
    def steps(self) -> list[tuple]:
        return list(zip(self.states, self.actions, self.rewards))

    @property
    def length(self) -> int:
        return len(self.rewards)

    def discounted_return(self, gamma: float) -> float:
        return float(np.dot(np.asarray(self.rewards), gamma ** np.arange(self.length)))


# ---------------------------------------------------------------------------
# exact solvers


def _require_tabular(env, what: str):
    if not getattr(env, "is_tabular", False):
        raise UnsupportedOperationError(f"{what} needs a tabular environment")


def bellman_residual(mdp: TabularMDP, q: np.ndarray) -> float:
    tq = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
    return float(np.max(np.abs(tq - q)))


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Optimal Q-table and its greedy policy (ties go to the smallest action)."""
    _require_tabular(mdp, "value_iteration")
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    residual = np.inf
    for _ in range(max_iter):
        q_new = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        if residual <= tol:
            break
    else:
        raise ConvergenceError(
            f"value iteration stopped after {max_iter} sweeps with residual {residual:.3e}")
    return q, greedy_actions(q, tie_tol=10 * tol)


def greedy_actions(q: np.ndarray, tie_tol: float = 1e-9) -> np.ndarray:
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tie_tol, axis=1)


def policy_matrix(policy, mdp: TabularMDP) -> np.ndarray:
    if isinstance(policy, np.ndarray):
        probs = policy
    else:
        probs = policy.probs()
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {probs.shape} does not match the MDP")
    return probs


def policy_evaluation(mdp: TabularMDP, policy) -> np.ndarray:
    """Exact state values by solving (I - gamma P_pi) V = r_pi."""
    _require_tabular(mdp, "policy_evaluation")
    pi = policy_matrix(policy, mdp)
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)


def exact_return(mdp: TabularMDP, policy) -> float:
    return float(mdp.initial_dist @ policy_evaluation(mdp, policy))


def stationary_visitation(mdp, policy) -> np.ndarray:
    """Discounted occupancy rho(s, a) = (1 - gamma) sum_t gamma^t Pr(s_t = s, a_t = a)."""
    _require_tabular(mdp, "stationary_visitation")
    pi = policy_matrix(policy, mdp)
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    d = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi.T,
                        (1.0 - mdp.gamma) * mdp.initial_dist)
    rho = np.clip(d, 0.0, None)[:, None] * pi
    return rho / rho.sum()


def expert_policy(env, softness: float = 0.0, tol: float = 1e-10):
    """Near-optimal expert for either environment family.

    Tabular: softmax over Q*/softness (greedy when softness is 0).
    Point mass: clipped LQR mean with Gaussian exploration std ``softness``.
    """
    from .policy import LinearGaussianPolicy, TabularSoftmaxPolicy

    if softness < 0:
        raise ValueError("softness must be non-negative")
    if env.is_tabular:
        q, greedy = value_iteration(env, tol)
        if softness == 0:
            logits = np.full(q.shape, -np.inf)
            logits[np.arange(env.n_states), greedy] = 0.0
        else:
            logits = q / softness
        return TabularSoftmaxPolicy(logits)
    gain = env.lqr_gain()
    return LinearGaussianPolicy(-gain, std=softness, low=env.action_low, high=env.action_high)


# ---------------------------------------------------------------------------
# simulation


def rollout(env, policy, horizon: int, seed=None) -> Trajectory:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = _as_rng(seed)
    s = env.reset(rng)
    states, actions, rewards = [], [], []
    for _ in range(horizon):
        a = policy.sample(s, rng)
        if not env.is_tabular:
            a = np.clip(a, env.action_low, env.action_high)
        nxt, r = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        if env.is_terminal(nxt):
            break
        s = nxt
    return Trajectory(states, actions, rewards, horizon)


def estimate_return(env, policy, n_trials: int = 20, horizon: int | None = None,
                    seed=None) -> tuple[float, float]:
    """Monte Carlo mean and std of the discounted return over ``n_trials`` rollouts.

    Trial ``k`` uses the ``k``-th child of ``SeedSequence(seed)``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if horizon is None:
        horizon = default_horizon(env.gamma)
    elif env.gamma**horizon > 1e-3:
        raise ValueError(f"horizon {horizon} leaves truncation bias above 1e-3 r_max/(1-gamma)")
    children = np.random.SeedSequence(seed).spawn(n_trials)
    returns = np.array([
        rollout(env, policy, horizon, np.random.default_rng(c)).discounted_return(env.gamma)
        for c in children
    ])
    std = float(returns.std(ddof=1)) if n_trials > 1 else 0.0
    return float(returns.mean()), std


# ---------------------------------------------------------------------------
# configuration


def make_env(env_id: str):
    """Environment by registry id: ``gridworld5``, ``chain<n>`` or ``pointmass``."""
    if env_id == "gridworld5":
        return gridworld_from_ascii(GRIDWORLD5, gamma=0.95, name="gridworld5")
    if env_id.startswith("chain") and env_id[5:].isdigit():
        return chain_mdp(int(env_id[5:]))
    if env_id == "pointmass":
        return PointMassEnv()
    path = Path(env_id)
    if path.suffix == ".json" and path.exists():
        return load_env_config(path)
    raise ValueError(f"unknown environment id {env_id!r}")


def env_from_dict(cfg: dict[str, Any]):
    kind = cfg.get("type")
    if kind == "gridworld":
        rows = cfg["map"]
        if isinstance(rows, str):
            rows = rows.splitlines()
        return gridworld_from_ascii(rows, gamma=cfg.get("gamma", 0.95),
                                    slip=cfg.get("slip", 0.0), name=cfg.get("name", "gridworld"))
    if kind == "tabular":
        term = cfg.get("terminal")
        return TabularMDP(np.array(cfg["transition"]), np.array(cfg["reward"]), cfg["gamma"],
                          np.array(cfg["initial_dist"]), r_max=cfg.get("r_max", 1.0),
                          terminal=None if term is None else np.array(term, dtype=bool),
                          name=cfg.get("name", "tabular"))
    if kind == "pointmass":
        extra = {k: np.array(cfg[k]) for k in ("dynamics_a", "dynamics_b") if k in cfg}
        return PointMassEnv(dt=cfg.get("dt", 0.1), noise_std=cfg.get("noise_std", 0.0),
                            gamma=cfg.get("gamma", 0.95), init_scale=cfg.get("init_scale", 1.0),
                            name=cfg.get("name", "pointmass"), **extra)
    raise ValueError(f"unknown environment type {kind!r}")


def load_env_config(path) -> TabularMDP | PointMassEnv:
    with open(path) as fh:
        return env_from_dict(json.load(fh))
