"""Deterministic sub-seed derivation.

Every stochastic component (synthetic data, encoder init, shuffling, the
frozen backbone) draws its own sub-seed from the single root seed, so results
do not depend on construction order.
"""

from __future__ import annotations

import hashlib


def derive_seed(root: int, tag: str) -> int:
    """Stable 31-bit sub-seed for a named component under a root seed."""
    digest = hashlib.blake2b(f"{root}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**31 - 1)
