"""Deterministic seed-stream derivation shared by every stochastic component.

Splitting rule: substream ``i`` of a master seed uses a counter-based Philox
generator keyed by ``(master XOR i, fnv1a64(domain))``.  The domain word keeps
streams from different call sites (dataset collection, window sampling,
evaluation episodes, ...) independent even when they share a master seed and
index.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of a short ASCII tag."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def stream(master: int, index: int, domain: str) -> np.random.Generator:
    """Independent generator for substream `index` of `master` in `domain`."""
    key = np.array([(int(master) ^ int(index)) & _MASK64, fnv1a64(domain)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
