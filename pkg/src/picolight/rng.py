"""Counter-based splittable random number generation.

Every random draw is a pure function of (seed, stream, counter), so results
never depend on scheduling or on how work is split across workers.  Streams
are derived by hashing structured keys (pixel index, sample index, usage
domain), which gives each path its own reproducible sequence and lets
gradient replay re-trace the exact primal paths.

The mixer is the 64-bit finalizer from SplitMix64; draws are taken at
`base + (counter+1) * GAMMA`, i.e. the SplitMix64 sequence itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0**-53)


def mix64(x):
    """SplitMix64 finalizer. Accepts uint64 scalars or arrays, wraps mod 2^64."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def fold_key(h, v):
    """Fold one more key component into a stream hash."""
    h = np.asarray(h, dtype=np.uint64)
    v = np.asarray(v, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(h ^ (mix64(v) + GAMMA))


def make_stream(*components):
    """Hash structured key components (ints or uint64 arrays) into a stream id."""
    h = np.zeros((), dtype=np.uint64)
    for c in components:
        h = fold_key(h, c)
    return h


def _base(seed, stream):
    seed = np.asarray(seed, dtype=np.uint64)
    return mix64(seed ^ mix64(stream))


def random_u64(seed, stream, counter):
    """Raw 64-bit draw for (seed, stream, counter)."""
    counter = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(_base(seed, stream) + (counter + np.uint64(1)) * GAMMA)


def random_float(seed, stream, counter):
    """Uniform float64 in [0, 1) for (seed, stream, counter). Vectorized."""
    bits = random_u64(seed, stream, counter) >> np.uint64(11)
    return bits.astype(np.float64) * _INV_2_53


@dataclass
class RngState:
    """Sequential view over one (seed, stream) pair.

    Identical (seed, stream) pairs reproduce identical sequences on all
    platforms; the counter advances by one per draw.
    """

    seed: int = 0
    stream: int = 0
    counter: int = field(default=0)

    def next_float(self) -> float:
        """Advance the state and return a uniform float in [0, 1)."""
        u = random_float(self.seed, np.uint64(self.stream), self.counter)
        self.counter += 1
        return float(u)

    def next_u64(self) -> int:
        u = random_u64(self.seed, np.uint64(self.stream), self.counter)
        self.counter += 1
        return int(u)

    def split(self, tag: int) -> "RngState":
        """Derive an independent child stream keyed by `tag`."""
        return RngState(self.seed, int(fold_key(np.uint64(self.stream), tag)))


class VecRng:
    """Per-lane counter-based RNG over a batch of streams.

    Each lane owns its own stream (usually hashed from pixel and sample
    indices) and an independent counter.  Draws for inactive lanes are
    still counted by the caller if it wants lane alignment, but nothing
    here depends on which lanes are active: lane i's sequence is a pure
    function of (seed, stream[i]).
    """

    def __init__(self, seed: int, streams: np.ndarray):
        self.seed = np.uint64(seed)
        self.streams = np.asarray(streams, dtype=np.uint64)
        self.counters = np.zeros(self.streams.shape, dtype=np.uint64)

    @property
    def n(self) -> int:
        return self.streams.shape[0]

    def next_float(self) -> np.ndarray:
        u = random_float(self.seed, self.streams, self.counters)
        self.counters = self.counters + np.uint64(1)
        return u

    def next_2d(self) -> tuple[np.ndarray, np.ndarray]:
        return self.next_float(), self.next_float()
