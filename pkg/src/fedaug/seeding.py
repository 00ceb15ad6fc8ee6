"""Derivation of independent, named random streams from one master seed.

Every consumer of randomness asks for its own stream by label (plus optional
integer indices such as round or client id). Streams are independent, so
adding a new consumer never perturbs the draws of existing ones.
"""
from __future__ import annotations

import zlib

import numpy as np


def seed_stream(master_seed: int, label: str, *indices: int) -> np.random.Generator:
    """Return a generator for the sub-stream named by ``label`` and ``indices``."""
    entropy = (
        int(master_seed) & 0xFFFFFFFFFFFFFFFF,
        zlib.crc32(label.encode("utf-8")),
        *(int(i) & 0xFFFFFFFFFFFFFFFF for i in indices),
    )
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy))
