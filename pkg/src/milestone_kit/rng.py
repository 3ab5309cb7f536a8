"""Counter-based random number streams for reproducible parallel sampling.

Every stochastic routine takes an explicit :class:`RngStream`. A stream is
identified by (seed, stream id); distinct ids give statistically independent
Philox streams and the same pair reproduces bit-identical output regardless
of chunking. Worker streams are derived with :func:`substream` using fixed
namespace codes so that concurrent estimators never collide.
"""
from __future__ import annotations

import numpy as np

# Namespace codes for derived stream ids (kept stable for reproducibility).
NS_CELL = 1
NS_REPLICA = 2
NS_KERNEL = 3
NS_CHAIN = 4

_NS_SHIFT = 2**32


class RngStream:
    """A named Philox stream: (seed, stream) -> reproducible normal/uniform draws."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.counter = 0
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def normals(self, n: int) -> np.ndarray:
        self.counter += int(n)
        return self._gen.standard_normal(int(n))

    def uniforms(self, n: int) -> np.ndarray:
        self.counter += int(n)
        return self._gen.random(int(n))

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        self.counter += int(n)
        return self._gen.integers(lo, hi, size=int(n))


def substream(rng: RngStream, namespace: int, index: int) -> RngStream:
    """Derive the worker stream (namespace, index) of a base stream.

    The id layout is base*2^48 + namespace*2^32 + index (index < 2^32),
    so cells, replicas and kernel starts draw from disjoint streams.
    """
    if not 0 <= index < _NS_SHIFT:
        raise ValueError("substream index out of range")
    sid = (rng.stream * (2**48) + namespace * _NS_SHIFT + index) % (2**64)
    return RngStream(rng.seed, sid)
