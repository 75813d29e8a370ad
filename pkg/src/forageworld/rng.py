"""Counter-based, splittable random streams.

Every stochastic subsystem draws from its own named stream derived from a
single master seed.  A stream is the triple ``(master_seed, label, counter)``;
output ``i`` is a SplitMix64 finalizer applied to ``key + (i + 1) * golden``
where ``key`` mixes the seed with an FNV-1a hash of the label.  Streams never
share a counter, so consuming one never perturbs another.

Scalar draws use Python integers and bulk draws use wrapping ``uint64``
arithmetic; both produce identical sequences.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO_NEG53 = 1.0 / (1 << 53)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))


def label_hash(label: str) -> int:
    """64-bit FNV-1a hash of a stream label."""
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class RngStream:
    """A named, deterministic random stream.

    The instance is mutable (draws advance ``counter``), but the output is a
    pure function of ``(master_seed, label, counter)``.  Use :meth:`copy` to
    snapshot a state.
    """

    __slots__ = ("master_seed", "label", "counter", "_key")

    def __init__(self, master_seed: int, label: str, counter: int = 0):
        if not label:
            raise ValueError("stream label must be non-empty")
        self.master_seed = int(master_seed) & MASK64
        self.label = label
        self.counter = int(counter)
        self._key = _mix(self.master_seed ^ label_hash(label))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, label={self.label!r}, counter={self.counter})"

    def __eq__(self, other):
        if not isinstance(other, RngStream):
            return NotImplemented
        return (self.master_seed, self.label, self.counter) == (
            other.master_seed, other.label, other.counter)

    def __getstate__(self):
        return (self.master_seed, self.label, self.counter)

    def __setstate__(self, state):
        seed, label, counter = state
        self.master_seed = seed
        self.label = label
        self.counter = counter
        self._key = _mix(seed ^ label_hash(label))

    def copy(self) -> "RngStream":
        return RngStream(self.master_seed, self.label, self.counter)

    def child(self, suffix: str) -> "RngStream":
        """Independent stream whose label extends this one."""
        return RngStream(self.master_seed, f"{self.label}/{suffix}")

    # raw draws

    def next_u64(self) -> int:
        self.counter += 1
        return _mix((self._key + self.counter * GOLDEN) & MASK64)

    def u64s(self, k: int) -> np.ndarray:
        c = np.arange(self.counter + 1, self.counter + k + 1, dtype=np.uint64)
        self.counter += k
        with np.errstate(over="ignore"):
            z = np.uint64(self._key) + c * np.uint64(GOLDEN)
        return _mix_array(z)

    # uniform reals

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _TWO_NEG53

    def uniforms(self, k: int) -> np.ndarray:
        if k == 0:
            return np.zeros(0)
        return (self.u64s(k) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53

    # integers

    def int_below(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` by rejection sampling.

        64-bit draws at or above the largest multiple of ``n`` are discarded,
        so every residue has exactly the same number of preimages.
        """
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def ints_below(self, n: int, k: int) -> np.ndarray:
        """``k`` draws of :meth:`int_below`; consumes exactly the same counter range."""
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        out = []
        need = k
        while need > 0:
            x = self.u64s(need)
            if limit < (1 << 64):
                x = x[x < np.uint64(limit)]
            out.append(x % np.uint64(n))
            need -= len(x)
        if not out:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(out).astype(np.int64)

    # derived distributions

    def normals(self, k: int) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        m = (k + 1) // 2
        u = self.uniforms(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:k]

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """One draw per row of a ``(B, A)`` probability matrix (inverse CDF)."""
        probs = np.atleast_2d(probs)
        u = self.uniforms(probs.shape[0])
        cdf = np.cumsum(probs, axis=1)
        idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
        return np.minimum(idx, probs.shape[1] - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.int_below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)


RngState = RngStream


def derive_stream(master_seed: int, stream_label: str) -> RngStream:
    """Fresh stream for ``stream_label`` under ``master_seed``."""
    return RngStream(master_seed, stream_label)


def next_uniform(state: RngStream) -> float:
    return state.uniform()


def next_int_below(state: RngStream, n: int) -> int:
    return state.int_below(n)
