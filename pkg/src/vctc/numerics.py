"""Log-domain arithmetic and deterministic random sampling.

Everything downstream (lattice recursions, losses, training) leans on two
things defined here: numerically stable log-sum-exp reductions and a
counter-based random number generator whose output is a pure function of
``(seed, call index)``.  The latter makes any consumer replayable: snapshot
the integer call counter, restore it later, and the draw stream continues
bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NEG_INF = float("-inf")

_MASK64 = (1 << 64) - 1


def log_add(a: float, b: float) -> float:
    """Stable ``log(exp(a) + exp(b))`` for two log-domain masses."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def log_sum_exp(values) -> float:
    """Stable ``log(sum(exp(v)))`` over a non-empty collection.

    Uses the usual max-shift; returns exactly ``-inf`` when every input is
    ``-inf`` (an empty mass, not an error).  An empty collection is a
    contract violation.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("log_sum_exp of an empty collection is undefined")
    m = float(np.max(arr))
    if m == NEG_INF:
        return NEG_INF
    if math.isinf(m):  # +inf dominates everything
        return m
    return m + math.log(float(np.sum(np.exp(arr - m))))


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer; used to fold derivation keys."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fold_key(seed: int, key) -> int:
    """Mix an int or string key into a 64-bit seed."""
    h = seed & _MASK64
    if isinstance(key, str):
        for byte in key.encode("utf-8"):
            h = _splitmix64(h ^ byte)
    elif isinstance(key, (int, np.integer)):
        h = _splitmix64(h ^ (int(key) & _MASK64))
    else:
        raise TypeError(f"rng derivation keys must be int or str, got {type(key)!r}")
    return h


@dataclass
class Rng:
    """Deterministic counter-based generator.

    Every sampling call builds a fresh Philox stream keyed by
    ``(seed, calls)`` and bumps the counter, so the state is just two
    integers.  ``derive`` produces an independent child generator from the
    parent seed plus arbitrary int/str keys; children never share streams
    with the parent or with differently-keyed siblings.
    """

    seed: int
    calls: int = 0

    def _next_generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.calls & _MASK64], dtype=np.uint64)
        self.calls += 1
        return np.random.Generator(np.random.Philox(key=key))

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._next_generator().standard_normal(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._next_generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        return self._next_generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_generator().permutation(n)

    def derive(self, *keys) -> "Rng":
        """Independent child generator named by ``keys`` (ints or strings)."""
        if not keys:
            raise ValueError("derive requires at least one key")
        h = _splitmix64(self.seed & _MASK64)
        for key in keys:
            h = _fold_key(h, key)
        return Rng(seed=h)

    def state(self) -> dict:
        return {"seed": int(self.seed), "calls": int(self.calls)}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(seed=int(state["seed"]), calls=int(state["calls"]))


def sample_standard_normal(rng: Rng, shape) -> np.ndarray:
    """i.i.d. N(0, 1) draws with the given shape; deterministic under the rng state."""
    shape = tuple(int(s) for s in (shape if hasattr(shape, "__iter__") else (shape,)))
    if any(s <= 0 for s in shape):
        raise ValueError(f"non-positive extent in sample shape {shape}")
    return rng.standard_normal(shape)
