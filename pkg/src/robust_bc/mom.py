"""Median-of-means machinery: batch partitions, batch losses and medians."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidSpecError

CLEAN_BATCH_CAP = 64


@dataclass(frozen=True, eq=False)
class BatchPartition:
    batches: np.ndarray  # (M, b), each row sorted ascending
    held_out: np.ndarray
    n: int
    seed: object = None

    @property
    def n_batches(self) -> int:
        return self.batches.shape[0]

    @property
    def batch_size(self) -> int:
        return self.batches.shape[1]


def max_batch_size(epsilon: float, cap: int = CLEAN_BATCH_CAP) -> int:
    """Largest batch size allowed at corruption level ``epsilon``: floor(1/(3 eps)).

    Returns 0 for eps > 1/3, where no batch size satisfies the constraint.
    """
    if not 0.0 <= epsilon < 0.5:
        raise InvalidSpecError(f"epsilon must lie in [0, 0.5), got {epsilon}")
    if epsilon == 0:
        return cap
    return math.floor(1 / (3 * Fraction(repr(float(epsilon)))))


def partition(n: int, b: int, seed=None) -> BatchPartition:
    """Random split of range(n) into n // b batches of size b.

    The n mod b leftover indices are held out for this round only.
    """
    if b < 1:
        raise ValueError("batch size must be at least 1")
    if n < b:
        raise ValueError(f"cannot form a batch of size {b} from {n} samples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _partition(n, b, rng, seed)


def _partition(n: int, b: int, rng: np.random.Generator, seed=None) -> BatchPartition:
    if b == 1:
        # the singleton partition is unique; a shuffle would only reorder it
        return BatchPartition(np.arange(n)[:, None], np.zeros(0, dtype=np.int64), n, seed)
    perm = rng.permutation(n)
    m = n // b
    batches = perm[: m * b].reshape(m, b)
    if b > 1:
        batches = np.sort(batches, axis=1)
    return BatchPartition(batches, np.sort(perm[m * b:]), n, seed)


def sample_nll(policy, dataset) -> np.ndarray:
    """-log pi(a_i | s_i) for every pair in the dataset."""
    if dataset.is_tabular and hasattr(policy, "log_probs"):
        return -policy.log_probs().ravel()[dataset.pair_index(policy.n_actions)]
    return -policy.log_prob_batch(dataset.states, dataset.actions)


def batch_nll(policy, dataset, batch_indices) -> float:
    idx = np.asarray(batch_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("batch is empty")
    if idx.min() < 0 or idx.max() >= dataset.n:
        raise IndexError("batch index out of range")
    lp = policy.log_prob_batch(dataset.states[idx], dataset.actions[idx])
    return -float(np.mean(lp))


def batch_means(per_sample: np.ndarray, part: BatchPartition) -> np.ndarray:
    return per_sample[part.batches].mean(axis=1)


def median_lower(values) -> tuple[float, int]:
    """Element of rank ceil(M/2) (ascending) and its index; ties go to the smallest index."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("median of an empty list")
    k = (v.size + 1) // 2 - 1
    val = np.partition(v, k)[k]
    return float(val), int(np.flatnonzero(v == val)[0])


def median_window(values, width: int) -> np.ndarray:
    """Sorted indices of the ``width`` values ranked around the lower median.

    ``width=1`` returns the lower-median index.  Wider windows use a linear
    selection; ties straddling a window edge are resolved deterministically
    but not by index.
    """
    v = np.asarray(values, dtype=np.float64)
    if width == 1:
        return np.array([median_lower(v)[1]])
    if width < 1 or width % 2 == 0 or width > v.size:
        raise ValueError("window width must be odd and at most the number of values")
    k = (v.size + 1) // 2 - 1
    lo = min(max(k - width // 2, 0), v.size - width)
    hi = lo + width - 1
    order = np.argpartition(v, [lo, hi]) if hi > lo else np.argpartition(v, lo)
    return np.sort(order[lo:hi + 1])


def mom_objective(pi, pi_prime, dataset, part: BatchPartition) -> tuple[float, int]:
    """median_j (l_j(pi) - l_j(pi')) and the index of the median batch."""
    if part.n != dataset.n:
        raise ValueError("partition was built for a different dataset size")
    diff = sample_nll(pi, dataset) - sample_nll(pi_prime, dataset)
    return median_lower(batch_means(diff, part))


def mom_value(policy, dataset, part: BatchPartition) -> tuple[float, int]:
    """median_j l_j(pi), the objective minimized by plain MOM training."""
    return median_lower(batch_means(sample_nll(policy, dataset), part))
