"""Stable seed derivation so randomized steps are reproducible and order-independent."""

from __future__ import annotations

import hashlib
import random


def derive_seed(*parts: object) -> int:
    """Mix arbitrary parts into a 64-bit seed (stable across processes, unlike ``hash``)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def derived_rng(*parts: object) -> random.Random:
    return random.Random(derive_seed(*parts))
