"""Deterministic seed derivation.

All randomness in the package flows from a master seed through this one
function: every stage, episode, and sweep point names its stream with a
string path, and the derived 64-bit seed feeds a fresh PCG64 generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *path) -> int:
    """Stable 64-bit seed for the stream named by (master, *path)."""
    text = str(int(master)) + "".join(f"/{p}" for p in path)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *path)))
