"""Reproducible random number streams for parallel trajectory ensembles.

Each trajectory owns a counter-based Philox stream keyed on
``(master_seed, trajectory_index)``, so results are independent of worker
count, scheduling order, and batching.  Array draws consume the stream
exactly like the equivalent sequence of scalar draws.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def trajectory_rng(master_seed: int, trajectory_index: int) -> np.random.Generator:
    """Generator for one trajectory, decoupled from all other indices."""
    key = np.array([master_seed & _MASK64, trajectory_index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
