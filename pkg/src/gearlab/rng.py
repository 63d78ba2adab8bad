"""Named random substreams derived from one experiment seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    return zlib.crc32(str(part).encode())


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``, e.g. ``substream(7, "era", epoch, index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([_key(seed)] + [_key(n) for n in names])))
