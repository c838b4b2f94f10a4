"""Counter-based random streams keyed by (seed, purpose, index)."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent Philox generator for one (seed, purpose, index) triple.

    Purposes are hashed with CRC32 so the key is stable across processes.
    """
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode()), int(index)])
    return np.random.Generator(np.random.Philox(key))
