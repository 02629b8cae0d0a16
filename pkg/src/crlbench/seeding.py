"""Deterministic seed derivation for independent random streams.

Every stochastic stage (data generation, class shuffling, augmentation,
weight init, probe init, minibatch order) owns a seed derived from the run
seed plus a string path naming the stage, so streams never alias and runs
replay bit-identically.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts: int | str) -> int:
    """Hash a tuple of ints/strings into a 63-bit seed."""
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
