"""Seed derivation.

A single master seed fans out to every random stream of a run. Sub-seeds are
the first 8 bytes (little-endian) of SHA-256 over ``master:label1:label2:...``,
so they do not depend on call order or on which worker computes them.
"""

import hashlib
from typing import Union

import numpy as np

SeedLabel = Union[int, str]


def derive_seed(master: int, *labels: SeedLabel) -> int:
    """Derive a 64-bit sub-seed from a master seed and a path of labels.

    Args:
        master: The master (experiment or sweep) seed
        *labels: Labels naming the stream, e.g. ``("client", 0, 3)``

    Returns:
        Non-negative integer below 2**64
    """
    payload = ":".join(str(part) for part in (master, *labels))
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, *labels: SeedLabel) -> np.random.Generator:
    """Return a fresh generator seeded with ``derive_seed(master, *labels)``."""
    return np.random.default_rng(derive_seed(master, *labels))
