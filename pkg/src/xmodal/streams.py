"""Named, reproducible random streams.

Every random draw in the package comes from a generator built by
:func:`stream`, keyed by the master seed plus a tuple of ints/strings
(epoch, sample id, purpose tag, ...). Results therefore depend only on the
keys, never on call order across threads.
"""

import numpy as np

from ._kernels import fnv1a64


def tag(key):
    """Map an int or string key to a non-negative 32-bit int."""
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return fnv1a64(str(key).encode("utf-8")) & 0xFFFFFFFF


def stream(seed, *keys):
    seq = np.random.SeedSequence([tag(seed)] + [tag(k) for k in keys])
    return np.random.Generator(np.random.PCG64(seq))
