"""Named sub-seeds derived from one root seed."""

import zlib

import numpy as np


def derive_seed(root: int, name: str, *extra: int) -> int:
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode()), *extra])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
