"""Named child random streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def child_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def child_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, name))
