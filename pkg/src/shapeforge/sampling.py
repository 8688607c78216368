"""Counter-based random draws.

Every draw is addressed by a :class:`SeedSpec` ``(root_seed, stream_label,
index)``. The triple is hashed into the state of a SplitMix64 generator, so
draw ``i`` never depends on draws ``0..i-1`` and results are independent of
execution order and worker count.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SeedSpec:
    root_seed: int
    stream_label: str
    index: int = 0

    def child(self, suffix: str) -> SeedSpec:
        """A statistically independent stream for a sub-purpose of the same draw."""
        return SeedSpec(self.root_seed, f"{self.stream_label}/{suffix}", self.index)

    def at(self, index: int) -> SeedSpec:
        return SeedSpec(self.root_seed, self.stream_label, index)

    def key(self) -> int:
        payload = (
            struct.pack("<Q", self.root_seed & _MASK64)
            + self.stream_label.encode("utf-8")
            + b"\x00"
            + struct.pack("<Q", self.index & _MASK64)
        )
        return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")

    def rng(self) -> SplitMix64:
        return SplitMix64(self.key())


@dataclass(frozen=True)
class BetaParams:
    alpha: float = 4.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")


class SplitMix64:
    """Small 64-bit PRNG (Steele, Lea & Flood) with the draws this package needs."""

    __slots__ = ("state",)

    def __init__(self, state: int):
        self.state = state & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform on [0, 1) with 53 bits of resolution."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randbelow(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        # Box-Muller, cosine branch only so each call consumes exactly two words
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    def gamma(self, shape: float) -> float:
        """Gamma(shape, 1) via the Marsaglia-Tsang squeeze/rejection method."""
        if shape < 1.0:
            # boost: G(a) = G(a + 1) * U^(1/a)
            u = 1.0 - self.random()
            return self.gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = 1.0 - self.random()
            if u < 1.0 - 0.0331 * x**4:
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def beta(self, alpha: float, beta: float) -> float:
        x = self.gamma(alpha)
        y = self.gamma(beta)
        total = x + y
        if total <= 0.0:
            # both gammas underflowed; only reachable for extreme small shapes
            return 0.5
        return min(1.0, max(0.0, x / total))

    def permutation(self, n: int) -> list[int]:
        """Uniform permutation of ``range(n)`` by Fisher-Yates."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def sample_lambda(seed: SeedSpec, params: BetaParams) -> float:
    """One Beta(alpha, beta) mixing weight, deterministic in ``seed``."""
    return seed.rng().beta(params.alpha, params.beta)


def sample_permutation(seed: SeedSpec, n: int) -> tuple[int, ...]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return tuple(seed.rng().permutation(n))


def sample_pairing(seed: SeedSpec, n_shapes: int, n_textures: int, k: int) -> list[tuple[int, int]]:
    """``k`` independent uniform (shape_idx, texture_idx) pairs, drawn with replacement.

    Pair ``j`` is keyed on ``seed.index + j`` so any single pair can be
    regenerated without drawing the others.
    """
    if n_shapes < 1 or n_textures < 1 or k < 1:
        raise ValueError("n_shapes, n_textures and k must all be >= 1")
    pairs = []
    for j in range(k):
        rng = seed.at(seed.index + j).rng()
        pairs.append((rng.randbelow(n_shapes), rng.randbelow(n_textures)))
    return pairs
