"""Expert demonstrations, the corruption process, and the RBCD file format."""
from __future__ import annotations

import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .envsim import default_horizon
from .errors import FormatError, InvalidSpecError

CORRUPTION_MODES = ("boundary", "uniform", "custom-adversarial")


def floor_fraction(eps: float, n: int) -> int:
    """floor(eps * n) evaluated on the decimal value of ``eps``.

    Working from ``repr`` keeps 0.29 * 100 at 29 instead of 28.
    """
    return math.floor(Fraction(repr(float(eps))) * n)


@dataclass(eq=False)
class DemoDataset:
    states: np.ndarray
    actions: np.ndarray
    corrupted_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states)
        self.actions = np.asarray(self.actions)
        self.corrupted_mask = np.asarray(self.corrupted_mask, dtype=bool)
        n = len(self.states)
        if len(self.actions) != n or len(self.corrupted_mask) != n:
            raise ValueError("states, actions and corrupted_mask must have the same length")
        for arr in (self.states, self.actions, self.corrupted_mask):
            arr.setflags(write=False)
        self._pair_index = None

    @property
    def n(self) -> int:
        return len(self.states)

    def __len__(self) -> int:
        return self.n

    @property
    def is_tabular(self) -> bool:
        return self.states.ndim == 1 and np.issubdtype(self.states.dtype, np.integer)

    @property
    def state_dim(self) -> int:
        return 0 if self.is_tabular else self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return 0 if self.is_tabular else self.actions.shape[1]

    @property
    def pairs(self) -> list[tuple]:
        return list(zip(self.states.tolist(), self.actions.tolist()))

    @property
    def n_corrupted(self) -> int:
        return int(self.corrupted_mask.sum())

    def pair_index(self, n_actions: int) -> np.ndarray:
        """Flat ``s * n_actions + a`` index per pair (tabular only), cached."""
        if self._pair_index is None or self._pair_index[0] != n_actions:
            self._pair_index = (n_actions, self.states.astype(np.int64) * n_actions + self.actions)
        return self._pair_index[1]

    def equals(self, other: "DemoDataset") -> bool:
        return (
            self.states.dtype == other.states.dtype
            and self.actions.dtype == other.actions.dtype
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.corrupted_mask, other.corrupted_mask)
            and self.meta == other.meta
        )

    def __eq__(self, other):
        return isinstance(other, DemoDataset) and self.equals(other)

    __hash__ = None


@dataclass(frozen=True)
class CorruptionSpec:
    epsilon: float
    mode: str = "uniform"
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 0.5:
            raise InvalidSpecError(f"epsilon must lie in [0, 0.5), got {self.epsilon}")
        if self.mode not in CORRUPTION_MODES:
            raise InvalidSpecError(f"mode must be one of {CORRUPTION_MODES}, got {self.mode!r}")


def collect_demos(env, expert, n: int, horizon: int | None = None, seed=None,
                  restart: str = "geometric", env_id: str | None = None,
                  softness: float | None = None) -> DemoDataset:
    """Run the expert and record ``n`` consecutive (state, action) pairs.

    With ``restart="geometric"`` each transition is followed with probability
    gamma and otherwise the agent restarts from the initial distribution, so
    the stream is distributed as the expert's discounted visitation.  Rollouts
    are also cut at ``horizon``.  ``restart="horizon"`` only cuts at the
    horizon (and at terminal states).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if restart not in ("geometric", "horizon"):
        raise ValueError("restart must be 'geometric' or 'horizon'")
    if horizon is None:
        horizon = default_horizon(env.gamma)
    rng = np.random.default_rng(seed)
    states, actions = [], []
    s, t = env.reset(rng), 0
    while len(states) < n:
        a = expert.sample(s, rng)
        if not env.is_tabular:
            a = np.clip(a, env.action_low, env.action_high)
        states.append(s)
        actions.append(a)
        nxt, _ = env.step(s, a, rng)
        t += 1
        cut = t >= horizon or env.is_terminal(nxt)
        if restart == "geometric":
            cut = cut or rng.random() >= env.gamma
        if cut:
            s, t = env.reset(rng), 0
        else:
            s = nxt
    meta = {
        "env": env_id or getattr(env, "name", "env"),
        "softness": softness,
        "horizon": int(horizon),
        "seed": None if seed is None else int(seed),
        "restart": restart,
    }
    if env.is_tabular:
        meta.update(n_states=env.n_states, n_actions=env.n_actions)
        st = np.asarray(states, dtype=np.int64)
        ac = np.asarray(actions, dtype=np.int64)
    else:
        meta.update(state_dim=env.state_dim, action_dim=env.action_dim)
        st = np.asarray(states, dtype=np.float64).reshape(n, env.state_dim)
        ac = np.asarray(actions, dtype=np.float64).reshape(n, env.action_dim)
    return DemoDataset(st, ac, np.zeros(n, dtype=bool), meta)


def corrupt(dataset: DemoDataset, spec: CorruptionSpec, indices=None,
            replacement=None) -> DemoDataset:
    """Return a copy of ``dataset`` with floor(eps * N) actions replaced.

    Indices are drawn uniformly without replacement unless ``indices`` is
    given (adversarial placement).  Continuous actions become random
    vertices of [-1, 1]^d (``boundary``) or uniform draws from the box
    (``uniform``).  Tabular actions are replaced by a uniformly random
    different action.  ``custom-adversarial`` takes the new actions from
    ``replacement``.
    """
    n = dataset.n
    k = floor_fraction(spec.epsilon, n)
    if spec.epsilon > 0 and k == 0:
        warnings.warn(f"epsilon * N = {spec.epsilon * n:.3g} < 1: no pairs corrupted", stacklevel=2)
    rng = np.random.default_rng(spec.seed)
    if indices is None:
        idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    else:
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if len(idx) != k:
            raise InvalidSpecError(f"expected {k} corruption indices, got {len(idx)}")
        if k and (idx[0] < 0 or idx[-1] >= n):
            raise InvalidSpecError("corruption index out of range")

    actions = dataset.actions.copy()
    if spec.mode == "custom-adversarial":
        if replacement is None:
            raise InvalidSpecError("custom-adversarial mode needs replacement actions")
        actions[idx] = np.asarray(replacement, dtype=actions.dtype).reshape(actions[idx].shape)
    elif dataset.is_tabular:
        if spec.mode != "uniform":
            raise InvalidSpecError("tabular data supports 'uniform' (non-expert) corruption only")
        n_actions = dataset.meta.get("n_actions")
        if n_actions is None:
            n_actions = int(dataset.actions.max()) + 1
        if n_actions < 2:
            raise InvalidSpecError("need at least two actions to corrupt")
        actions[idx] = (actions[idx] + rng.integers(1, n_actions, size=len(idx))) % n_actions
    elif spec.mode == "boundary":
        actions[idx] = rng.choice(np.array([-1.0, 1.0]), size=(len(idx), dataset.action_dim))
    else:
        actions[idx] = rng.uniform(-1.0, 1.0, size=(len(idx), dataset.action_dim))

    mask = dataset.corrupted_mask.copy()
    mask[idx] = True
    meta = dict(dataset.meta, epsilon=spec.epsilon, corruption=spec.mode,
                corruption_seed=spec.seed)
    return DemoDataset(dataset.states.copy(), actions, mask, meta)


# ---------------------------------------------------------------------------
# RBCD container
#   magic 'RBCD' | version u16 | N u64 | state_dim u32 | action_dim u32
#   states | actions | mask bitset | metadata length u32 | metadata JSON | CRC32

_MAGIC = b"RBCD"
_VERSION = 1
_HEADER = struct.Struct("<4sHQII")


def save_dataset(dataset: DemoDataset, path) -> None:
    n, ds, da = dataset.n, dataset.state_dim, dataset.action_dim
    parts = [_HEADER.pack(_MAGIC, _VERSION, n, ds, da)]
    if dataset.is_tabular:
        parts.append(dataset.states.astype("<u4").tobytes())
        parts.append(dataset.actions.astype("<u4").tobytes())
    else:
        parts.append(np.ascontiguousarray(dataset.states, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(dataset.actions, dtype="<f8").tobytes())
    parts.append(np.packbits(dataset.corrupted_mask, bitorder="little").tobytes())
    meta = json.dumps(dataset.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> DemoDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8:
        raise FormatError("header", "file too short")
    magic, version, n, ds, da = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise FormatError("magic", f"expected {_MAGIC!r}, got {magic!r}")
    if version != _VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if (ds == 0) != (da == 0):
        raise FormatError("header", "state_dim and action_dim must both be zero for tabular data")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum", "CRC32 mismatch (truncated or corrupted file)")
    off = _HEADER.size
    tabular = ds == 0
    width_s, width_a = (4, 4) if tabular else (8 * ds, 8 * da)
    need = off + n * (width_s + width_a) + (n + 7) // 8 + 4
    if len(body) < need:
        raise FormatError("payload", "payload shorter than the header declares")
    if tabular:
        states = np.frombuffer(body, "<u4", n, off).astype(np.int64)
        off += 4 * n
        actions = np.frombuffer(body, "<u4", n, off).astype(np.int64)
        off += 4 * n
    else:
        states = np.frombuffer(body, "<f8", n * ds, off).reshape(n, ds).astype(np.float64)
        off += 8 * n * ds
        actions = np.frombuffer(body, "<f8", n * da, off).reshape(n, da).astype(np.float64)
        off += 8 * n * da
    nbytes = (n + 7) // 8
    mask = np.unpackbits(np.frombuffer(body, np.uint8, nbytes, off), count=n,
                         bitorder="little").astype(bool)
    off += nbytes
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    if off + mlen != len(body):
        raise FormatError("metadata", "metadata length does not match the file size")
    try:
        meta = json.loads(body[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("metadata", f"invalid JSON trailer ({exc})") from None
    return DemoDataset(states, actions, mask, meta)


def dataset_io(dataset, path, direction: str):
    if direction == "write":
        save_dataset(dataset, path)
        return None
    if direction == "read":
        return load_dataset(path)
    raise ValueError("direction must be 'read' or 'write'")
