"""Counter-keyed random streams.

Every random draw in the package comes from a generator keyed by a tuple of
integers ``(seed, stream, step, index)``, so results do not depend on how
many workers produce a batch or on the order they run in.
"""

import numpy as np

TRAIN_MASK = 1
EVAL_MASK = 2
SHUFFLE = 3
AUGMENT = 4
SYNTHETIC = 5
INIT = 6
PROBE = 7


def keyed_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))
