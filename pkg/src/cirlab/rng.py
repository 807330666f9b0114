"""Counter-based deterministic random number generation.

Every draw is a pure integer function of (key, counter), so a stream can be
replayed from its seed on any platform and split into independent named
sub-streams without consuming draws from the parent.

Algorithm (all arithmetic mod 2**64):

    word(c)  = mix64(key + (c + 1) * GOLDEN)          c = 0, 1, 2, ...
    mix64(x) : x ^= x >> 30; x *= 0xBF58476D1CE4E5B9
               x ^= x >> 27; x *= 0x94D049BB133111EB
               x ^= x >> 31

which is the splitmix64 output sequence for seed ``key``.  Child streams use

    child_key = mix64(key ^ mix64(fnv1a64(tag)))

Floating-point mappings:

    uniform:  (word >> 11) * 2**-53                    in [0, 1)
    gaussian: Box-Muller, each value consumes exactly two uniforms:
              sqrt(-2 ln(1 - u0)) * cos(2 pi u1)
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U64_SCALE = 2.0**-53


def _mix64(x: np.ndarray) -> np.ndarray:
    """Splitmix64 finalizer on a uint64 array (in place on a copy)."""
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


def _fnv1a64(data: bytes) -> np.uint64:
    h = np.array([_FNV_OFFSET], dtype=np.uint64)
    for b in data:
        h ^= np.uint64(b)
        h *= _FNV_PRIME
    return np.uint64(h[0])


class Rng:
    """Single-owner splittable counter-based generator.

    Not thread-safe: one stream has one owner.  For independent parallel
    randomness, ``split`` named children up front.
    """

    def __init__(self, seed: int, _key: np.uint64 | None = None):
        if _key is None:
            if not (0 <= int(seed) < 2**64):
                raise ValueError("seed must fit in an unsigned 64-bit integer")
            self.key = np.uint64(seed)
        else:
            self.key = np.uint64(_key)
        self.seed = int(seed)
        self.counter = 0

    def split(self, tag: str | int) -> "Rng":
        """Derive an independent child stream from a name, without drawing."""
        tag_hash = _mix64(np.array([_fnv1a64(str(tag).encode("utf-8"))], dtype=np.uint64))[0]
        child_key = _mix64(np.array([self.key ^ tag_hash], dtype=np.uint64))[0]
        child = Rng(self.seed, _key=child_key)
        return child

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        counters = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(self.key + counters * GOLDEN)

    def uniform(self, n: int | None = None, shape: tuple[int, ...] | None = None) -> np.ndarray | float:
        """Uniform draws in [0, 1).  Scalar when called with no arguments."""
        if shape is not None:
            size = int(np.prod(shape)) if shape else 1
            return (self.u64(size) >> np.uint64(11)).astype(np.float64).reshape(shape) * _U64_SCALE
        if n is None:
            return float((self.u64(1)[0] >> np.uint64(11))) * _U64_SCALE
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _U64_SCALE

    def gaussian(self, n: int | None = None, shape: tuple[int, ...] | None = None) -> np.ndarray | float:
        """Standard normal draws via Box-Muller; two uniforms per value."""
        if shape is not None:
            size = int(np.prod(shape)) if shape else 1
            return np.asarray(self.gaussian(size)).reshape(shape)
        m = 1 if n is None else n
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        z = r * np.cos(2.0 * np.pi * u[1::2])
        if n is None:
            return float(z[0])
        return z

    def integers(self, n: int, bound: int) -> np.ndarray:
        """``n`` integers in [0, bound) by modular reduction.

        Bias is bound/2**64, negligible for the desk-scale bounds used here.
        """
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.u64(n) % np.uint64(bound)).astype(np.int64)

    def randint(self, bound: int) -> int:
        return int(self.integers(1, bound)[0])

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using the documented integer stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int, take: int | None = None) -> np.ndarray:
        """First ``take`` entries of a Fisher-Yates permutation of range(n).

        A partial shuffle: positions 0..take-1 are exact prefix samples of the
        full permutation, uniform without replacement.
        """
        take = n if take is None else take
        arr = np.arange(n, dtype=np.int64)
        upper = min(take, n - 1)
        # Swap position i with i + (word_i mod (n - i)); words drawn in one call.
        words = self.u64(upper)
        for i in range(upper):
            j = i + int(words[i] % np.uint64(n - i))
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:take].copy()
