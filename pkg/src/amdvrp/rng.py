"""Seeded random streams.

Every random draw in the package goes through :func:`stream`, which returns a
``numpy.random.Generator`` backed by PCG64 (a portable 64-bit generator whose
output is identical across platforms). Independent streams are obtained by
giving each purpose its own spawn key, so e.g. changing the number of samples
drawn never perturbs instance generation.
"""

import numpy as np

INSTANCE = 0
SAMPLE = 1
INIT = 2
TRAIN_DATA = 3
HELDOUT = 4
GRADCHECK = 5

_MASK64 = (1 << 64) - 1


def stream(seed, purpose, *keys):
    """Return the generator for ``(seed, purpose, *keys)``."""
    spawn_key = (int(purpose),) + tuple(int(k) for k in keys)
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(ss))
