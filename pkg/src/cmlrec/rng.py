"""Deterministic random-stream derivation.

Every run draws all of its randomness from a single root seed. Independent
concerns (splitting, parameter init, triplet sampling, validation negatives,
evaluation-time history draws) use named substreams so that changing how one
consumer draws does not perturb the others.
"""
from __future__ import annotations

import numpy as np

# Fixed stream tags. Appending new tags is safe; renumbering breaks
# reproducibility of existing runs.
SPLIT = 1
INIT = 2
SAMPLING = 3
VALIDATION_NEGATIVES = 4
EVALUATION = 5
HISTORY = 6


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for the substream identified by ``path``.

    The same ``(seed, path)`` always yields an identical stream.
    """
    return np.random.default_rng([int(seed)] + [int(p) for p in path])
