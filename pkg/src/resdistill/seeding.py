"""Deterministic seed derivation.

Every random stream in the toolkit is keyed off one root seed plus a named
path (stage name, entry index, ...), so stage outputs do not depend on
execution order or interleaving.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *path: int | str) -> int:
    """Derive a 63-bit seed from a root seed and a key path.

    Stable across platforms and library versions (plain SHA-256 of the
    textual key path).
    """
    key = str(int(root)) + "".join("/" + str(p) for p in path)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(root: int, *path: int | str) -> np.random.Generator:
    """Numpy generator for a named sub-stream."""
    return np.random.default_rng(derive_seed(root, *path))
