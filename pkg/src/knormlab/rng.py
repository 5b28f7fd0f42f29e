"""Counter-based random streams.

A stream is identified by the run seed plus a tuple of stream ids, e.g.
``("dropout", layer_id, step, sample_id)``.  Draws depend only on that key, never
on how many other streams were consumed before, so dropout masks and noise are
the same whether samples are processed one by one, batched, or on other threads.
"""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _word(x):
    if isinstance(x, str):
        return zlib.crc32(x.encode()) | (1 << 40)
    x = int(x)
    if x < 0:
        raise ValueError("stream ids must be non-negative")
    return x


class Rng:
    def __init__(self, seed):
        self.seed = int(seed) & _MASK64

    def stream(self, *ids):
        """A fresh Philox generator keyed by ``(seed, *ids)``."""
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_word(i) for i in ids))
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"Rng(seed={self.seed})"
