"""Counter-based random streams.

Every draw is addressed by ``(master seed, step index, purpose)``; inside a
step, row ``i`` of the returned array belongs to particle ``i``. Because the
whole row block for a step is generated in one serial call before any
parallel work, the output does not depend on how particles are later
split across threads.
"""

from __future__ import annotations

import numpy as np

# Purpose tags keep the streams for different uses of the same step disjoint.
INIT = 0
PROPAGATE = 1
RESAMPLE = 2
TARGET = 3
AUX = 4


def stream(seed: int, *key: int) -> np.random.Generator:
    """A Philox generator whose key is derived from ``seed`` and ``key``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]]
    philox_key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=philox_key))


def uniforms(seed: int, step: int, purpose: int, shape) -> np.ndarray:
    """Uniform [0, 1) block for one step; first axis indexes particles."""
    return stream(seed, step, purpose).random(shape)
