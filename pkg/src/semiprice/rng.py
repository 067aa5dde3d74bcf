"""Labelled, reproducible random streams.

Every consumer of randomness (covariates, noise, a policy's exploration
prices) gets its own generator derived from ``(seed, label)`` so that
changing one consumer never shifts the draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, label: str) -> np.random.Generator:
    """Generator for ``label`` under base ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, label_key(label)]))
