"""Policy classes with exact log-likelihoods and analytic gradients.

Every trainable policy keeps its parameters in one flat float64 vector
(``get_params``/``set_params``) so optimizers never need to know the
architecture.  Gradients returned by ``nll_and_grad`` and
``entropy_and_grad`` are aligned with that vector.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedOperationError

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


class TabularSoftmaxPolicy:
    """pi(a|s) = softmax(L[s])[a] over a finite state/action table."""

    kind = "tabular"

    def __init__(self, logits):
        logits = np.array(logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ValueError("logits must be a (n_states, n_actions) table")
        self._logits = logits
        self._cache = None

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularSoftmaxPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @classmethod
    def random_init(cls, n_states: int, n_actions: int, seed=None,
                    scale: float = 0.1) -> "TabularSoftmaxPolicy":
        return cls(_rng(seed).uniform(-scale, scale, size=(n_states, n_actions)))

    @property
    def n_states(self) -> int:
        return self._logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self._logits.shape[1]

    @property
    def logits(self) -> np.ndarray:
        return self._logits.copy()

    @property
    def n_params(self) -> int:
        return self._logits.size

    @property
    def shape(self) -> tuple:
        return self._logits.shape

    def get_params(self) -> np.ndarray:
        return self._logits.ravel().copy()

    def set_params(self, theta: np.ndarray) -> None:
        self._logits = np.array(theta, dtype=np.float64).reshape(self._logits.shape)
        self._cache = None

    def copy(self) -> "TabularSoftmaxPolicy":
        return TabularSoftmaxPolicy(self._logits)

    def log_probs(self) -> np.ndarray:
        if self._cache is None:
            lp = log_softmax(self._logits)
            self._cache = (lp, np.exp(lp), np.cumsum(np.exp(lp), axis=1))
        return self._cache[0]

    def probs(self) -> np.ndarray:
        self.log_probs()
        return self._cache[1]

    def _check(self, states, actions=None):
        states = np.asarray(states)
        if states.size and (states.min() < 0 or states.max() >= self.n_states):
            raise IndexError(f"state index out of range [0, {self.n_states})")
        if actions is not None:
            actions = np.asarray(actions)
            if actions.size and (actions.min() < 0 or actions.max() >= self.n_actions):
                raise IndexError(f"action index out of range [0, {self.n_actions})")
        return states, actions

    def log_prob_batch(self, states, actions) -> np.ndarray:
        states, actions = self._check(states, actions)
        return self.log_probs()[states, actions]

    def sample(self, state, rng) -> int:
        self._check([state])
        self.log_probs()
        cum = self._cache[2][state]
        i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        return min(i, self.n_actions - 1)

    def nll_and_grad(self, states, actions, weights=None):
        states, actions = self._check(states, actions)
        n = len(states)
        if n == 0:
            raise ValueError("nll_and_grad needs at least one pair")
        lp = self.log_probs()
        S, A = self._logits.shape
        w = None if weights is None else np.asarray(weights, dtype=np.float64)
        nll = -float(np.sum(lp[states, actions] * (1.0 if w is None else w))) / n
        count_sa = np.bincount(states * A + actions, weights=w, minlength=S * A).reshape(S, A)
        count_s = count_sa.sum(axis=1)
        grad = (count_s[:, None] * self.probs() - count_sa) / n
        return nll, grad.ravel()

    def entropy_and_grad(self, states):
        """Mean action entropy over ``states`` and its gradient."""
        states, _ = self._check(states)
        n = len(states)
        lp = self.log_probs()
        p = self.probs()
        plogp = np.where(p > 0, p * lp, 0.0)
        h = -plogp.sum(axis=1)
        count_s = np.bincount(states, minlength=self.n_states).astype(np.float64)
        # dH/dL[s,a] = -p_a (log p_a + H)
        dh = -np.where(p > 0, p * (lp + h[:, None]), 0.0)
        grad = count_s[:, None] * dh / n
        return float(count_s @ h) / n, grad.ravel()

    def architecture(self) -> dict:
        return {"class": "TabularSoftmaxPolicy", "n_states": self.n_states,
                "n_actions": self.n_actions}


class GaussianMlpPolicy:
    """Diagonal Gaussian whose mean is a tanh-squashed ReLU network.

    The density is evaluated on the raw action; the mean lies in [-1, 1] and
    ``log_std`` is clamped to [-5, 2] when used.
    """

    kind = "mlp"

    def __init__(self, layer_sizes, params=None, seed=None, init_log_std: float = 0.0):
        sizes = [int(x) for x in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("layer_sizes needs input and output widths, all positive")
        self.layer_sizes = sizes
        self._shapes = [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]
        n = sum(i * o + o for i, o in self._shapes) + sizes[-1]
        if params is None:
            rng = _rng(seed)
            chunks = []
            for fan_in, fan_out in self._shapes:
                bound = 1.0 / np.sqrt(fan_in)
                chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
                chunks.append(np.zeros(fan_out))
            chunks.append(np.full(sizes[-1], init_log_std))
            params = np.concatenate(chunks)
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self._theta = params

    @classmethod
    def build(cls, state_dim: int, action_dim: int, hidden=(64, 64, 64), seed=None,
              init_log_std: float = 0.0) -> "GaussianMlpPolicy":
        return cls([state_dim, *hidden, action_dim], seed=seed, init_log_std=init_log_std)

    @property
    def state_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def action_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return self._theta.size

    @property
    def shape(self) -> tuple:
        return tuple(self.layer_sizes)

    def get_params(self) -> np.ndarray:
        return self._theta.copy()

    def set_params(self, theta) -> None:
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != self._theta.shape:
            raise ValueError("parameter vector has the wrong length")
        self._theta = theta

    def copy(self) -> "GaussianMlpPolicy":
        return GaussianMlpPolicy(self.layer_sizes, params=self._theta)

    def _unpack(self):
        out, k = [], 0
        for fan_in, fan_out in self._shapes:
            w = self._theta[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = self._theta[k:k + fan_out]
            k += fan_out
            out.append((w, b))
        return out, self._theta[k:]

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self._unpack()[1], LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def _forward(self, states):
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        layers, _ = self._unpack()
        acts = [x]
        for i, (w, b) in enumerate(layers):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0.0) if i < len(layers) - 1 else np.tanh(z))
        return acts

    def mean(self, states) -> np.ndarray:
        return self._forward(states)[-1]

    def log_prob_batch(self, states, actions) -> np.ndarray:
        mu = self.mean(states)
        a = np.asarray(actions, dtype=np.float64).reshape(mu.shape)
        log_std = self.log_std
        z = (a - mu) / np.exp(log_std)
        return -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * self.action_dim * LOG_2PI

    def sample(self, state, rng) -> np.ndarray:
        mu = self.mean(state)[0]
        return mu + self.std * rng.standard_normal(self.action_dim)

    def nll_and_grad(self, states, actions, weights=None):
        acts = self._forward(states)
        n = acts[0].shape[0]
        if n == 0:
            raise ValueError("nll_and_grad needs at least one pair")
        mu = acts[-1]
        a = np.asarray(actions, dtype=np.float64).reshape(mu.shape)
        layers, raw_log_std = self._unpack()
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        inv_var = np.exp(-2.0 * log_std)
        diff = a - mu
        per_sample = (0.5 * np.sum(diff * diff * inv_var, axis=1) + np.sum(log_std)
                      + 0.5 * self.action_dim * LOG_2PI)
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        nll = float(w @ per_sample) / n
        wn = (w / n)[:, None]

        grads = []
        # d nll / d mean, then through tanh
        delta = -diff * inv_var * wn * (1.0 - mu * mu)
        for i in range(len(layers) - 1, -1, -1):
            w_i, _ = layers[i]
            grads.append((acts[i].T @ delta).ravel())
            grads.append(delta.sum(axis=0))
            if i > 0:
                delta = (delta @ w_i.T) * (acts[i] > 0)
        flat = []
        for j in range(len(grads) - 2, -1, -2):
            flat.extend([grads[j], grads[j + 1]])
        z2 = diff * diff * inv_var
        g_log_std = np.sum(wn * (1.0 - z2), axis=0)
        inside = (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
        flat.append(np.where(inside, g_log_std, 0.0))
        return nll, np.concatenate(flat)

    def entropy_and_grad(self, states):
        raw = self._unpack()[1]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        h = float(np.sum(log_std) + 0.5 * self.action_dim * (LOG_2PI + 1.0))
        grad = np.zeros_like(self._theta)
        grad[-self.action_dim:] = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(float)
        return h, grad

    def architecture(self) -> dict:
        return {"class": "GaussianMlpPolicy", "layer_sizes": self.layer_sizes,
                "activation": "relu", "output": "tanh"}


class LinearGaussianPolicy:
    """Clipped linear-feedback mean with fixed Gaussian noise; the point-mass expert."""

    kind = "linear"

    def __init__(self, gain, std: float = 0.0, low: float = -1.0, high: float = 1.0):
        self.gain = np.atleast_2d(np.asarray(gain, dtype=np.float64))
        self.noise = float(std)
        self.low, self.high = low, high

    @property
    def action_dim(self) -> int:
        return self.gain.shape[0]

    def mean(self, states) -> np.ndarray:
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return np.clip(x @ self.gain.T, self.low, self.high)

    def sample(self, state, rng) -> np.ndarray:
        mu = self.mean(state)[0]
        if self.noise == 0:
            return mu
        return mu + self.noise * rng.standard_normal(self.action_dim)

    def log_prob_batch(self, states, actions) -> np.ndarray:
        if self.noise == 0:
            raise UnsupportedOperationError("deterministic policy has no density")
        mu = self.mean(states)
        z = (np.asarray(actions, dtype=np.float64).reshape(mu.shape) - mu) / self.noise
        return -0.5 * np.sum(z * z, axis=1) - self.action_dim * (np.log(self.noise) + 0.5 * LOG_2PI)

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.gain.ravel(), [self.noise, self.low, self.high]])

    @property
    def shape(self) -> tuple:
        return self.gain.shape

    def architecture(self) -> dict:
        return {"class": "LinearGaussianPolicy", "gain_shape": list(self.gain.shape)}


# ---------------------------------------------------------------------------
# functional surface


def _unzip(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        return pairs
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one (state, action) pair")
    states = np.array([p[0] for p in pairs])
    actions = np.array([p[1] for p in pairs])
    return states, actions


def log_prob(policy, state, action) -> float:
    return float(policy.log_prob_batch(np.array([state]), np.array([action]))[0])


def sample_action(policy, state, seed=None):
    return policy.sample(state, _rng(seed))


def nll_and_grad(policy, pairs, weights=None):
    """Mean negative log-likelihood over ``pairs`` and its exact gradient."""
    states, actions = _unzip(pairs)
    if len(states) == 0:
        raise ValueError("need at least one (state, action) pair")
    return policy.nll_and_grad(states, actions, weights)


def tv_distance(p1, p2, state_weights) -> float:
    """sum_s w(s) * TV(p1(.|s), p2(.|s))**2 for tabular policies."""
    for p in (p1, p2):
        if not isinstance(p, TabularSoftmaxPolicy):
            raise UnsupportedOperationError("tv_distance is defined for tabular policies only")
    if p1.shape != p2.shape:
        raise ValueError("policies must share state and action spaces")
    w = np.asarray(state_weights, dtype=np.float64)
    if w.shape != (p1.n_states,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("state_weights must be a probability vector over states")
    tv = 0.5 * np.abs(p1.probs() - p2.probs()).sum(axis=1)
    return float(w @ (tv * tv))


# ---------------------------------------------------------------------------
# serialization: RBCP container + JSON sidecar

_MAGIC = b"RBCP"
_VERSION = 1
_TAGS = {"tabular": 1, "mlp": 2, "linear": 3}


def save_policy(policy, path) -> None:
    path = Path(path)
    tag = _TAGS[policy.kind]
    shape = tuple(int(x) for x in policy.shape)
    theta = np.ascontiguousarray(policy.get_params(), dtype="<f8")
    body = (_MAGIC + struct.pack("<HBI", _VERSION, tag, len(shape))
            + struct.pack(f"<{len(shape)}I", *shape)
            + struct.pack("<Q", theta.size) + theta.tobytes())
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    sidecar = dict(policy.architecture(), format="RBCP", version=_VERSION, n_params=int(theta.size))
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_policy(path):
    data = Path(path).read_bytes()
    if len(data) < 4 + 7 + 4 or data[:4] != _MAGIC:
        raise FormatError("magic", "not an RBCP policy file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum", "CRC32 mismatch")
    version, tag, ndim = struct.unpack_from("<HBI", body, 4)
    if version != _VERSION:
        raise FormatError("version", f"unsupported version {version}")
    off = 4 + 7
    shape = struct.unpack_from(f"<{ndim}I", body, off)
    off += 4 * ndim
    (n,) = struct.unpack_from("<Q", body, off)
    off += 8
    if len(body) - off != 8 * n:
        raise FormatError("params", "parameter payload length mismatch")
    theta = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64)
    if tag == 1:
        return TabularSoftmaxPolicy(theta.reshape(shape))
    if tag == 2:
        return GaussianMlpPolicy(list(shape), params=theta)
    if tag == 3:
        rows, cols = shape
        k = rows * cols
        return LinearGaussianPolicy(theta[:k].reshape(rows, cols), std=theta[k],
                                    low=theta[k + 1], high=theta[k + 2])
    raise FormatError("class_tag", f"unknown policy class tag {tag}")
