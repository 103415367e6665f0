"""Scaled-Poisson measurement noise with reproducible seed derivation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NegativeActivity
from .kinetics import Tac

__all__ = ["NoiseLevel", "DEFAULT_NOISE_SCALES", "apply_poisson", "derive_seed"]

# Count scale per named level, counts per activity unit.  Level 1 is the
# noisiest (fewest counts).  These are defaults; scenario configs may
# override the table.
DEFAULT_NOISE_SCALES: dict[int, float] = {1: 0.25, 2: 1.0, 3: 4.0, 4: 16.0}


@dataclass(frozen=True)
class NoiseLevel:
    """A named noise level with its count scale (counts per activity unit)."""

    level: int
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("count scale must be positive")

    @classmethod
    def from_level(cls, level: int, scales: dict[int, float] | None = None) -> "NoiseLevel":
        table = DEFAULT_NOISE_SCALES if scales is None else scales
        if level not in table:
            raise ValueError(f"unknown noise level {level}; table has {sorted(table)}")
        keys = sorted(table)
        if any(table[a] >= table[b] for a, b in zip(keys, keys[1:])):
            raise ValueError("count scales must increase with the level number")
        return cls(level, float(table[level]))


def apply_poisson(tac: Tac, noise: NoiseLevel, seed: int) -> Tac:
    """Scaled Poisson noise: v -> Poisson(scale*v) / scale, elementwise.

    Mean is preserved exactly; variance is v/scale.  Deterministic for a
    given seed.
    """
    if np.any(tac.values < 0):
        raise NegativeActivity("cannot draw counts from negative activity")
    if np.isinf(noise.scale):
        # variance v/scale -> 0: the infinite-count limit is the clean curve
        return Tac(tac.grid, tac.values.copy())
    rng = np.random.default_rng(seed)
    counts = rng.poisson(tac.values * noise.scale)
    return Tac(tac.grid, counts / noise.scale)


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def derive_seed(master: int, index: int) -> int:
    """Per-realisation seed: splitmix64 finalizer of master + (index+1)*golden.

    Exact algorithm (all arithmetic mod 2**64), for bit-exact reproduction:
        z = master + (index + 1) * 0x9E3779B97F4A7C15
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)
    """
    z = (master + (index + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)
