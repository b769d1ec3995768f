"""Seed splitting for reproducible, scheduling-independent random streams.

Every random stream in the package is derived from one top-level integer seed.
A sub-seed is the first 8 bytes of ``sha256(f"{seed}|{stage}|{index}")`` read
little-endian, and the stream itself is a Philox counter-based generator keyed
by that sub-seed.  Two calls with the same ``(seed, stage, index)`` therefore
see the same numbers no matter which thread or process asks for them.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, stage: str, index: int = 0) -> int:
    token = f"{int(seed)}|{stage}|{int(index)}".encode()
    return int.from_bytes(hashlib.sha256(token).digest()[:8], "little")


def stream(seed: int, stage: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stage, index)``."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, stage, index)))
