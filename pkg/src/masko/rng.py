"""Deterministic random streams.

Every source of randomness in the package is a numpy Generator backed by
the Philox counter-based bit generator, keyed by ``(seed, stream tag)``.
Distinct tags give independent streams, so e.g. reshuffling the data does
not perturb the latent draws of the same run.
"""

from __future__ import annotations

import numpy as np

STREAM_INIT = 0  # parameter initialization
STREAM_LATENT = 1  # latent z / uniform draws during training
STREAM_SHUFFLE = 2  # per-epoch dataset permutation
STREAM_DATA = 3  # synthetic dataset synthesis
STREAM_EVAL = 4  # Monte-Carlo passes during evaluation


def stream(seed: int, tag: int) -> np.random.Generator:
    """Return the Philox-backed generator for (seed, tag)."""
    key = np.array([np.uint64(seed), np.uint64(tag)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
