"""Trainers: vanilla BC, the MOM tournament (robust BC), plain MOM and Noisy BC."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, TrainingDivergedError
from .mom import (CLEAN_BATCH_CAP, _partition, batch_means, max_batch_size, median_lower,
                  median_window, sample_nll)
from .policy import GaussianMlpPolicy, TabularSoftmaxPolicy

Callback = Callable[[int, object], None]


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 7.5e-4
    grad_clip: float = 0.1
    entropy_coef: float = 0.01
    l2_coef: float = 0.0
    epsilon_declared: float = 0.0
    batch_size_override: int | None = None
    median_window: int | str = 1
    seed: int = 0
    optimizer: str = "adam"
    ascent_steps: int = 1
    steps_per_epoch: int | None = None
    outer_iters: int = 5
    hidden_sizes: tuple = (64, 64, 64)

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if not isinstance(self.epochs, int) or self.epochs < 1:
            bad("epochs", "must be a positive integer")
        if not self.learning_rate >= 0:
            bad("learning_rate", "must be >= 0")
        if not self.grad_clip > 0:
            bad("grad_clip", "must be > 0")
        if self.entropy_coef < 0 or self.l2_coef < 0:
            bad("entropy_coef" if self.entropy_coef < 0 else "l2_coef", "must be >= 0")
        if not 0 <= self.epsilon_declared < 0.5:
            bad("epsilon_declared", "must lie in [0, 0.5)")
        if self.batch_size_override is not None and self.batch_size_override < 1:
            bad("batch_size_override", "must be >= 1")
        mw = self.median_window
        if mw != "max" and (not isinstance(mw, int) or mw < 1 or mw % 2 == 0):
            bad("median_window", "must be a positive odd integer or 'max'")
        if self.optimizer not in ("adam", "sgd"):
            bad("optimizer", "must be 'adam' or 'sgd'")
        if self.ascent_steps < 1:
            bad("ascent_steps", "must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            bad("steps_per_epoch", "must be >= 1")
        if self.outer_iters < 1:
            bad("outer_iters", "must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be an object")
        return cls.from_dict(d)


@dataclass
class EpochRecord:
    epoch: int
    tau: float
    nll_clean: float
    nll_corrupt: float
    wall_ms: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    final_tau: float = float("nan")
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def tau(self) -> np.ndarray:
        return self.column("tau")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "tau", "nll_clean", "nll_corrupt", "wall_ms"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.tau), repr(r.nll_clean), repr(r.nll_corrupt),
                            f"{r.wall_ms:.3f}"])


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.lr * grad


def make_optimizer(config: TrainConfig):
    return Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)


def clip_grad(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(grad @ grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# ---------------------------------------------------------------------------
# helpers shared by the trainers


def init_policy(dataset, config: TrainConfig, seed):
    """Fresh policy matching the dataset's spaces."""
    if dataset.is_tabular:
        meta = dataset.meta
        n_states = meta.get("n_states", int(dataset.states.max()) + 1)
        n_actions = meta.get("n_actions", int(dataset.actions.max()) + 1)
        return TabularSoftmaxPolicy.random_init(n_states, n_actions, seed=seed)
    return GaussianMlpPolicy.build(dataset.state_dim, dataset.action_dim,
                                   hidden=config.hidden_sizes, seed=seed)


def _streams(seed) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    train, per_epoch, final = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(train), np.random.default_rng(per_epoch),
            np.random.default_rng(final))


def _loss_grad(policy, dataset, idx, config: TrainConfig, descent: bool, weights=None):
    """Regularized gradient of the batch NLL, clipped.  Entropy only for the descent player."""
    _, g = policy.nll_and_grad(dataset.states[idx], dataset.actions[idx], weights)
    if descent and config.entropy_coef:
        g = g - config.entropy_coef * policy.entropy_and_grad(dataset.states[idx])[1]
    if config.l2_coef:
        g = g + config.l2_coef * policy.get_params()
    return clip_grad(g, config.grad_clip)


def _apply(policy, opt, grad) -> None:
    policy.set_params(opt.step(policy.get_params(), grad))


def _subset_means(nll: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    clean = float(nll[~mask].mean()) if (~mask).any() else float("nan")
    bad = float(nll[mask].mean()) if mask.any() else float("nan")
    return clean, bad


def _check_finite(epoch: int, tau: float, *policies) -> None:
    if not math.isfinite(tau) or not all(np.all(np.isfinite(p.get_params())) for p in policies):
        raise TrainingDivergedError(epoch, tau)


def _record(history, epoch, tau, nll, mask, t0) -> None:
    clean, bad = _subset_means(nll, mask)
    history.records.append(EpochRecord(epoch, tau, clean, bad, 1000.0 * (time.perf_counter() - t0)))


def resolve_batch_size(config: TrainConfig, n: int) -> int:
    """Batch size for the MOM trainers; refuses sizes that break b <= 1/(3 eps)."""
    cap = max_batch_size(config.epsilon_declared)
    b = min(cap, n) if config.batch_size_override is None else config.batch_size_override
    if cap < 1:
        raise ConfigError(f"epsilon_declared: no batch size satisfies b <= 1/(3*{config.epsilon_declared})")
    if b > cap:
        raise ConfigError(f"batch_size_override: {b} exceeds max_batch_size({config.epsilon_declared}) = {cap}")
    if b > n:
        raise ConfigError(f"batch_size_override: batch size {b} exceeds dataset size {n}")
    return b


def resolve_window(config: TrainConfig, m: int) -> int:
    """Number of batches averaged around the median; 'max' is the largest odd width <= M/6."""
    if config.median_window == "max":
        w = int(m // 6)
        return max(1, w if w % 2 else w - 1)
    w = config.median_window
    if w > m:
        raise ConfigError(f"median_window: {w} exceeds the number of batches {m}")
    if w > 1 and 6 * w > m:
        raise ConfigError(f"median_window: {w} exceeds M/6 = {m / 6:.2f}")
    return w


def _steps(config: TrainConfig, n: int, b: int) -> int:
    return config.steps_per_epoch or -(-n // b)


# ---------------------------------------------------------------------------
# trainers


def train_bc(dataset, policy_init, config: TrainConfig, callback: Callback | None = None,
             weights=None):
    """Minibatch descent on the (optionally weighted) mean NLL over all pairs."""
    policy = policy_init.copy()
    n = dataset.n
    b = min(config.batch_size_override or CLEAN_BATCH_CAP, n)
    steps = _steps(config, n, b)
    rng, _, _ = _streams(config.seed)
    opt = make_optimizer(config)
    history = TrainHistory()
    w_all = None if weights is None else np.asarray(weights, dtype=np.float64)

    def objective():
        nll = sample_nll(policy, dataset)
        tau = float(nll.mean() if w_all is None else (w_all * nll).mean())
        return tau, nll

    if callback:
        callback(0, policy)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm, start = rng.permutation(n), 0
        for _ in range(steps):
            if start >= n:
                perm, start = rng.permutation(n), 0
            idx = np.sort(perm[start:start + b])
            start += b
            w = None if w_all is None else w_all[idx]
            _apply(policy, opt, _loss_grad(policy, dataset, idx, config, True, w))
        tau, nll = objective()
        _check_finite(epoch, tau, policy)
        _record(history, epoch, tau, nll, dataset.corrupted_mask, t0)
        if callback:
            callback(epoch, policy)
    history.final_tau = history.records[-1].tau
    return policy, history


def train_rbc(dataset, pi_init, pi_prime_init, config: TrainConfig,
              callback: Callback | None = None, on_step=None):
    """Min-max MOM tournament: descent on pi, ascent on pi' at the median batch.

    ``on_step(step, idx)`` sees the indices each descent step trained on.
    """
    if type(pi_init) is not type(pi_prime_init) or pi_init.shape != pi_prime_init.shape:
        raise ConfigError("pi_prime_init: must share class and shape with pi_init")
    n = dataset.n
    b = resolve_batch_size(config, n)
    m = n // b
    width = resolve_window(config, m)
    steps = _steps(config, n, b)
    rng, eval_rng, final_rng = _streams(config.seed)
    pi, pp = pi_init.copy(), pi_prime_init.copy()
    opt, opt_p = make_optimizer(config), make_optimizer(config)
    history = TrainHistory(extras={"batch_size": b, "n_batches": m, "median_window": width})

    def select(values, part):
        sel = median_window(values, width)
        return np.sort(part.batches[sel].ravel())

    step = 0
    if callback:
        callback(0, pi)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        for _ in range(steps):
            part = _partition(n, b, rng)
            diff = sample_nll(pi, dataset) - sample_nll(pp, dataset)
            idx = select(batch_means(diff, part), part)
            if on_step:
                on_step(step, idx)
            step += 1
            g = _loss_grad(pi, dataset, idx, config, True)
            # ascent on the objective for pi' is descent on its own batch NLL
            g_p = _loss_grad(pp, dataset, idx, config, False)
            _apply(pi, opt, g)
            _apply(pp, opt_p, g_p)
            for _ in range(config.ascent_steps - 1):
                part = _partition(n, b, rng)
                diff = sample_nll(pi, dataset) - sample_nll(pp, dataset)
                idx_a = select(batch_means(diff, part), part)
                _apply(pp, opt_p, _loss_grad(pp, dataset, idx_a, config, False))
        history.extras["last_median_batch"] = idx
        nll = sample_nll(pi, dataset)
        part = _partition(n, b, eval_rng)
        tau = median_lower(batch_means(nll - sample_nll(pp, dataset), part))[0]
        _check_finite(epoch, tau, pi, pp)
        _record(history, epoch, tau, nll, dataset.corrupted_mask, t0)
        if callback:
            callback(epoch, pi)
    part = _partition(n, b, final_rng)
    history.final_tau = median_lower(batch_means(sample_nll(pi, dataset) - sample_nll(pp, dataset), part))[0]
    history.extras["pi_prime"] = pp
    return pi, history


def train_mom_min(dataset, policy_init, config: TrainConfig, callback: Callback | None = None,
                  on_step=None):
    """Descent on median_j l_j(pi): the tournament without the ascent player."""
    n = dataset.n
    b = resolve_batch_size(config, n)
    m = n // b
    width = resolve_window(config, m)
    steps = _steps(config, n, b)
    rng, eval_rng, final_rng = _streams(config.seed)
    pi = policy_init.copy()
    opt = make_optimizer(config)
    history = TrainHistory(extras={"batch_size": b, "n_batches": m, "median_window": width})

    step = 0
    if callback:
        callback(0, pi)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        for _ in range(steps):
            part = _partition(n, b, rng)
            sel = median_window(batch_means(sample_nll(pi, dataset), part), width)
            idx = np.sort(part.batches[sel].ravel())
            if on_step:
                on_step(step, idx)
            step += 1
            _apply(pi, opt, _loss_grad(pi, dataset, idx, config, True))
        history.extras["last_median_batch"] = idx
        nll = sample_nll(pi, dataset)
        tau = median_lower(batch_means(nll, _partition(n, b, eval_rng)))[0]
        _check_finite(epoch, tau, pi)
        _record(history, epoch, tau, nll, dataset.corrupted_mask, t0)
        if callback:
            callback(epoch, pi)
    history.final_tau = median_lower(batch_means(sample_nll(pi, dataset), _partition(n, b, final_rng)))[0]
    return pi, history


def train_noisy_bc(dataset, policy_init, config: TrainConfig, outer_iters: int | None = None,
                   callback: Callback | None = None):
    """Iterated weighted BC with weights w_i = pi_old(a_i | s_i), unnormalized.

    Each outer iteration re-fits for ``config.epochs`` epochs, warm-started
    from the previous iterate, then freezes the result as the new pi_old.
    """
    outer = config.outer_iters if outer_iters is None else outer_iters
    if outer < 1:
        raise ConfigError("outer_iters: must be >= 1")
    pi_old = policy_init.copy()
    pi = policy_init.copy()
    history = TrainHistory()
    for k in range(outer):
        weights = np.exp(-sample_nll(pi_old, dataset))
        cb = None
        if callback:
            offset = k * config.epochs

            def cb(epoch, policy, offset=offset):
                if epoch or not offset:
                    callback(offset + epoch, policy)
        cfg = config.replace(seed=int(np.random.SeedSequence([config.seed, k]).generate_state(1)[0]))
        pi, h = train_bc(dataset, pi, cfg, callback=cb, weights=weights)
        for r in h.records:
            r.epoch += k * config.epochs
        history.records.extend(h.records)
        pi_old = pi.copy()
    history.final_tau = history.records[-1].tau
    history.extras["weights"] = np.exp(-sample_nll(pi_old, dataset))
    history.extras["last_weights_used"] = weights
    return pi, history


ALGORITHMS = ("bc", "rbc", "mom_min", "noisy_bc")


def run_algorithm(algo: str, dataset, config: TrainConfig, seed, callback: Callback | None = None):
    """Initialize policies from ``seed`` and run one trainer."""
    ss = np.random.SeedSequence(seed)
    s_pi, s_pp = ss.spawn(2)
    pi0 = init_policy(dataset, config, np.random.default_rng(s_pi))
    if algo == "bc":
        return train_bc(dataset, pi0, config, callback)
    if algo == "rbc":
        pp0 = init_policy(dataset, config, np.random.default_rng(s_pp))
        return train_rbc(dataset, pi0, pp0, config, callback)
    if algo == "mom_min":
        return train_mom_min(dataset, pi0, config, callback)
    if algo == "noisy_bc":
        return train_noisy_bc(dataset, pi0, config, callback=callback)
    raise ConfigError(f"algo: unknown algorithm {algo!r}")
