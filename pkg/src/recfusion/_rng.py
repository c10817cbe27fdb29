import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named stage, derived from the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
