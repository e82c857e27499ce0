"""Counter-style seed derivation: one global seed, independent streams per component."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit seed for the stream named by ``labels`` under ``seed``.

    Streams are addressed by name rather than drawn in sequence, so adding a
    new stage leaves every existing stage's stream untouched.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
