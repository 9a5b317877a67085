"""Named random substreams derived from one top-level seed.

Every stream is a PCG64 bit generator seeded through ``SeedSequence(seed,
spawn_key=crc32(name)...)``. Changing this scheme changes every frozen
synthetic fixture, so treat it as a versioned format (``RNG_SCHEME``).
"""
import zlib

import numpy as np

RNG_SCHEME = "pcg64-seedsequence-crc32/v1"


def substream(seed: int, *names) -> np.random.Generator:
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
