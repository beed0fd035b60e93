"""Counter-based random streams.

Every random draw in the package comes from a Philox generator addressed by
``(seed, stream, step)``.  Two draws with the same address are bit-identical no
matter which order (or on which worker) they are evaluated.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def keyed_generator(seed, stream=0, step=0):
    """Return a ``numpy.random.Generator`` for one ``(seed, stream, step)`` key.

    ``seed`` and ``stream`` form the 128-bit Philox key; ``step`` occupies the
    high word of the counter, so successive steps never overlap for any draw
    smaller than 2**192 blocks.
    """
    if seed < 0 or stream < 0 or step < 0:
        raise ValueError(f"rng key components must be non-negative, got {(seed, stream, step)}")
    key = (int(seed) & _MASK64) | ((int(stream) & _MASK64) << 64)
    counter = np.array([0, 0, 0, int(step) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def uniform(shape, key):
    """Float64 uniforms in [0, 1) for ``key = (seed, stream, step)``."""
    return keyed_generator(*key).random(shape)
