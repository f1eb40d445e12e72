"""Named, counter-based random streams.

Every stochastic draw in the package goes through an :class:`RngStream`
built on numpy's Philox4x64-10 generator. The Philox key is derived from the
64-bit seed and a 64-bit FNV-1a hash of the stream name, so two streams with
the same (seed, name, counter) produce the same draws on every platform.
"""
from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"
_MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


class RngStream:
    """A reproducible stream of draws identified by ``(seed, name, counter)``.

    ``counter`` is the Philox block counter the stream starts from; each block
    yields four 64-bit words.
    """

    algorithm = ALGORITHM

    def __init__(self, seed: int, name: str = "default", counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.name = name
        self.counter = int(counter)
        key = np.array([self.seed, fnv1a64(name)], dtype=np.uint64)
        ctr = np.array([self.counter & _MASK64, 0, 0, 0], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key, counter=ctr)
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self):
        return f"RngStream({self.seed}, {self.name!r}, counter={self.counter})"

    def spawn(self, name: str) -> "RngStream":
        """Independent child stream, e.g. ``noise.spawn("layer3")``."""
        return RngStream(self.seed, f"{self.name}/{name}")

    def uniform_open(self, size=None) -> np.ndarray:
        """Uniform draws on the open interval (0, 1).

        Uses the top 53 bits of each raw word, offset by half an ulp, so 0
        and 1 are never produced (needed for the logistic inverse CDF).
        """
        n = 1 if size is None else int(np.prod(size))
        raw = np.asarray(self._bitgen.random_raw(n), dtype=np.uint64)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def logistic(self, size=None):
        """Logistic(0, 1) via the inverse CDF: ln u - ln(1 - u)."""
        u = self.uniform_open(size)
        return np.log(u) - np.log1p(-u)
