"""Named random sub-streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed: int, *names: str) -> np.random.Generator:
    """Generator keyed by ``seed`` and a path of names, e.g. ``("init", "block1")``.

    Streams with different names are independent, so adding or removing one
    component never shifts the random draws of another.
    """
    keys = [zlib.crc32(name.encode()) for name in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))
