"""Counter-based pseudo-randomness on top of numpy's Philox generator.

Streams are addressed, not sequential: ``Rng(seed).stream("gen", user, k)``
always yields the same draws no matter what other streams were consumed,
which is what lets pipeline stages fan out per user and stay reproducible.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _fold(seed: int, parts: tuple) -> int:
    h = _splitmix64(seed & _MASK64)
    for p in parts:
        if isinstance(p, str):
            for b in p.encode("utf-8"):
                h = _splitmix64(h ^ b)
        else:
            h = _splitmix64(h ^ (int(p) & _MASK64))
    return h


def derive_seed(seed: int, *parts) -> int:
    """Deterministically mix (seed, parts) into a fresh 64-bit seed."""
    return _fold(seed, parts)


class Rng:
    """One Philox stream keyed by (seed, *stream ids); same key, same draws."""

    def __init__(self, seed: int, *stream):
        self.seed = int(seed) & _MASK64
        self.stream_ids = tuple(stream)
        key = (self.seed, _fold(self.seed, self.stream_ids))
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def stream(self, *ids) -> "Rng":
        """Child stream addressed by additional ids."""
        return Rng(self.seed, *(self.stream_ids + ids))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def permutation(self, x):
        return self._gen.permutation(x)

    def bernoulli(self, p, size=None):
        draws = np.asarray(self._gen.random(size) < p, dtype=np.int64)
        return draws if size is not None else int(draws)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream_ids!r})"
