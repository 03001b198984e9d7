"""Named random sub-streams derived from one run seed.

``substream(seed, "shuffle")`` and ``substream(seed, "init")`` are
independent, so changing how one stream is consumed never shifts another.
"""
import zlib

import numpy as np


def subseed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))
