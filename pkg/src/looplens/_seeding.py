"""Deterministic child-seed derivation.

Every random stream in the package is keyed by ``(master_seed, label...)`` so
that work split across threads draws the same numbers as a sequential run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def child_rng(master: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))
