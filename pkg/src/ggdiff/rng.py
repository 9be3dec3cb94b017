"""Reproducible random streams.

Every random draw in the package comes from a Philox counter-based
generator (numpy's ``Philox`` bit generator). Sub-streams are keyed by
``derive_seed(master, purpose, index)``: the first 8 bytes of
SHA-256 over ``"{master}:{purpose}:{index}"``, read little-endian. The
scheme is platform independent and does not depend on execution order,
so per-image streams give the same results for any number of workers.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(master: int, purpose: str, index: int = 0) -> int:
    """Return a 64-bit seed for the stream ``(master, purpose, index)``."""
    token = f"{int(master) & MASK64}:{purpose}:{int(index)}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(token).digest()[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    """Philox generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64))


def stream(master: int, purpose: str, index: int = 0) -> np.random.Generator:
    return make_rng(derive_seed(master, purpose, index))
