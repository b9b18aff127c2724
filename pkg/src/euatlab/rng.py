"""Seedable random streams.

All randomness in the package flows from a single 64-bit root seed through
named substreams (``data``, ``init``, ``masks``, ``shuffle``, ``attack``, ...)
so that individual components can be re-seeded or varied independently.

The generator is numpy's Philox counter-based bit generator; substream keys
are derived by hashing ``root_seed`` together with the stream name, which
keeps derivation order-independent and documented enough to be reproduced
outside Python.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "generator", "substream"]

_SEED_MASK = (1 << 64) - 1


def derive_seed(root_seed: int, *names) -> int:
    """Derive a 64-bit child seed from a root seed and a path of names.

    The path elements are joined with ``/`` and hashed (SHA-256) together
    with the root seed; the first 8 bytes of the digest form the child seed.
    """
    path = "/".join(str(n) for n in names)
    digest = hashlib.sha256(f"{int(root_seed) & _SEED_MASK}:{path}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def generator(seed: int) -> np.random.Generator:
    """Philox generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & _SEED_MASK))


def substream(root_seed: int, *names) -> np.random.Generator:
    """Generator for the named substream of ``root_seed``."""
    return generator(derive_seed(root_seed, *names))
