"""Explicit, derivable random streams.

Every stochastic step draws from a generator keyed by ``(seed, *labels)`` so a
run can be replayed or resumed at any step without carrying generator state.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent PCG64 generator for ``seed`` and a path of labels."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([_word(seed)] + [_word(x) for x in labels])))
