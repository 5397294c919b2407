"""Deterministic fan-out of a master seed into named sub-seeds."""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *names) -> int:
    """Hash a master seed and a name path into a 64-bit sub-seed.

    The derivation is documented and stable: sha256 of
    ``"<master>/<name1>/<name2>/..."``, first 8 bytes little-endian.
    """
    path = "/".join(str(n) for n in (master, *names))
    digest = hashlib.sha256(path.encode()).digest()
    return int.from_bytes(digest[:8], "little")
