"""Deterministic random stream used by every stochastic operation.

The advance rule is splitmix64, chosen because it is trivially portable:
the same seed yields the same draw sequence on every platform and Python
build, which is what makes perturbed datasets and training runs
byte-reproducible.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class RngStream:
    """splitmix64 generator over a 64-bit state.

    A stream must never be shared across concurrent callers; derive one
    stream per task instead (see ``derive``).
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        z = self.state
        z = (z ^ (z >> 30)) * _MIX1 & _MASK
        z = (z ^ (z >> 27)) * _MIX2 & _MASK
        return z ^ (z >> 31)

    def unit(self) -> float:
        """Next float in [0, 1): top 53 bits of the next output word."""
        return (self.next_u64() >> 11) * 2.0**-53

    def below(self, n: int) -> int:
        """Next integer in [0, n) via floor(unit * n)."""
        return int(self.unit() * n)

    def gauss(self) -> float:
        """Standard normal draw (Box-Muller, two unit draws)."""
        import math

        u1 = self.unit()
        u2 = self.unit()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def derive(self, *tags: str | int) -> "RngStream":
        """Child stream whose seed mixes this stream's seed-independent tags.

        Mixing uses FNV-1a over the tag bytes so (seed, tags) -> child seed
        is stable across runs and platforms.
        """
        h = 0xCBF29CE484222325
        for tag in tags:
            data = str(tag).encode("utf-8") + b"\x1f"
            for b in data:
                h ^= b
                h = (h * 0x100000001B3) & _MASK
        return RngStream(self.state ^ h)
