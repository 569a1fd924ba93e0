"""Numeric primitives shared by every stage of the pipeline.

Everything here works in float64. The random generator is xoshiro256**
seeded through SplitMix64, so a given integer seed produces the same stream
on every platform; child streams are keyed by ``derive_seed(seed, *keys)``.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numba
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
KL_FLOOR = 1e-12
DEGENERATE_NORM = 1e-12


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its contract."""


# --------------------------------------------------------------------------
# probability functions


def _as_finite_vector(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def softmax(logits) -> np.ndarray:
    z = _as_finite_vector(logits, "logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a 2-d array via log-sum-exp."""
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def cross_entropy(logits, label: int) -> float:
    z = _as_finite_vector(logits, "logits")
    if not 0 <= int(label) < z.size:
        raise InvalidInputError(f"label {label} out of range for {z.size} classes")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    return float(lse - z[int(label)])


def kl_divergence(p, q) -> float:
    """KL(p || q) with 0 log 0 = 0 and q clamped below at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInputError(f"shape mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    qc = np.maximum(q[mask], KL_FLOOR)
    val = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(qc))))
    # rounding can leave tiny negatives when p == q
    return max(val, 0.0)


def l2_normalize(v) -> tuple[np.ndarray, bool]:
    """Project ``v`` onto the unit sphere.

    Returns ``(vector, degenerate)``; a vector with norm <= 1e-12 is returned
    unchanged with ``degenerate=True``.
    """
    v = np.asarray(v, dtype=np.float64)
    n = float(np.sqrt(np.dot(v, v)))
    if n <= DEGENERATE_NORM:
        return v.copy(), True
    return v / n, False


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    norms = np.where(norms <= DEGENERATE_NORM, 1.0, norms)
    return x / norms[:, None]


# --------------------------------------------------------------------------
# seeded randomness: SplitMix64 -> xoshiro256**


def splitmix64_next(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns (new_state, output)."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _key_to_int(key: Union[int, str]) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    return int(key) & MASK64


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    """Hash a seed and a path of keys into a 64-bit child seed."""
    _, h = splitmix64_next(int(seed) & MASK64)
    for k in keys:
        _, mixed = splitmix64_next(h ^ _key_to_int(k))
        h = mixed
    return h


_U = numba.uint64


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << _U(k)) | (x >> _U(64 - k))


@numba.njit(cache=True)
def _next(s):
    result = _rotl(s[1] * _U(5), 7) * _U(9)
    t = s[1] << _U(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.size):
        out[i] = _next(s)


@numba.njit(cache=True)
def _fill_uniform(s, out):
    scale = 1.0 / 9007199254740992.0
    for i in range(out.size):
        out[i] = float(_next(s) >> _U(11)) * scale


@numba.njit(cache=True)
def _fill_normal(s, out):
    # Box-Muller; u1 is drawn from (0, 1] so log(u1) is finite
    scale = 1.0 / 9007199254740992.0
    n = out.size
    i = 0
    while i < n:
        u1 = (float(_next(s) >> _U(11)) + 1.0) * scale
        u2 = float(_next(s) >> _U(11)) * scale
        r = np.sqrt(-2.0 * np.log(u1))
        out[i] = r * np.cos(2.0 * np.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * np.sin(2.0 * np.pi * u2)
        i += 2


@numba.njit(cache=True)
def _bounded(s, n):
    # unbiased integer in [0, n) by rejection
    un = _U(n)
    threshold = (_U(0) - un) % un
    while True:
        r = _next(s)
        if r >= threshold:
            return np.int64(r % un)


@numba.njit(cache=True)
def _partial_shuffle(s, n, k):
    # first k entries of a Fisher-Yates shuffle of arange(n)
    idx = np.arange(n)
    for i in range(k):
        j = i + _bounded(s, n - i)
        tmp = idx[i]
        idx[i] = idx[j]
        idx[j] = tmp
    return idx[:k].copy()


class SeededRng:
    """xoshiro256** generator whose 256-bit state is seeded by SplitMix64.

    Single-owner: never share one instance between workers; use
    :meth:`child` to derive independent streams instead.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64_next(sm)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    @classmethod
    def from_state(cls, words) -> "SeededRng":
        rng = cls.__new__(cls)
        rng.seed = None
        rng._state = np.array([int(w) & MASK64 for w in words], dtype=np.uint64)
        return rng

    @property
    def state(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self._state)

    def child(self, *keys: Union[int, str]) -> "SeededRng":
        if self.seed is None:
            raise InvalidInputError("child streams need a generator built from a seed")
        return SeededRng(derive_seed(self.seed, *keys))

    def next_u64(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.uint64)
        _fill_u64(self._state, out)
        return out

    def uniform(self, size=None):
        shape = () if size is None else size
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        _fill_uniform(self._state, out)
        return float(out[0]) if size is None else out.reshape(shape)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        out = np.empty(int(np.prod(size)), dtype=np.float64)
        _fill_normal(self._state, out)
        return out.reshape(size) * scale

    def integers(self, n: int) -> int:
        if n < 1:
            raise InvalidInputError("integers() needs n >= 1")
        return int(_bounded(self._state, n))

    def permutation(self, n: int) -> np.ndarray:
        return _partial_shuffle(self._state, n, n)

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        if not 0 <= k <= n:
            raise InvalidInputError(f"cannot draw {k} of {n} without replacement")
        return _partial_shuffle(self._state, n, k)
