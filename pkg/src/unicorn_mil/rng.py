"""Deterministic pseudo-randomness with named sub-streams.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's PCG64 bit generator seeded through a ``SeedSequence``.
Identical seeds give identical draw sequences across runs and platforms.

Sub-streams are derived by seed-splitting: ``derive(k)`` extends the
parent's spawn key with ``k``, so e.g. data shuffling, dropout, and
parameter initialization can consume independent streams without any
chance of overlap. The scheme is recorded in run metadata under
``ALGORITHM_ID``.
"""
from __future__ import annotations

import numpy as np

ALGORITHM_ID = "numpy-pcg64/seedseq-spawn"


class Rng:
    """Seed-deterministic random generator (PCG64)."""

    __slots__ = ("seed_sequence", "_gen")

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self.seed_sequence = seed
        else:
            self.seed_sequence = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self.seed_sequence))

    def derive(self, index: int) -> "Rng":
        """Independent child stream number ``index`` of this stream."""
        seq = self.seed_sequence
        child = np.random.SeedSequence(
            entropy=seq.entropy, spawn_key=tuple(seq.spawn_key) + (int(index),)
        )
        return Rng(child)

    # -- draws ------------------------------------------------------------

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape, dtype=np.float64)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64) * std

    def truncated_normal(self, shape, std: float, clip: float = 2.0) -> np.ndarray:
        """Normal(0, std) with draws outside ``clip`` standard deviations resampled."""
        out = self._gen.standard_normal(shape, dtype=np.float64)
        bad = np.abs(out) > clip
        while np.any(bad):
            out[bad] = self._gen.standard_normal(int(bad.sum()), dtype=np.float64)
            bad = np.abs(out) > clip
        return out * std

    def integers(self, low: int, high=None) -> int:
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, items: list) -> None:
        self._gen.shuffle(items)
