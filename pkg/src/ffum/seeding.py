"""Stable seed derivation.

Every random stream in a run is keyed by ``(master, purpose, *parts)`` rather
than by execution order, so client updates can run in any order or in parallel
without changing a single bit of the result.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, purpose: str, *parts: int) -> int:
    key = "|".join([str(int(master)), purpose, *(str(int(p)) for p in parts)])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(master: int, purpose: str, *parts: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, purpose, *parts))
