"""Deterministic seed derivation.

Every stochastic stage derives its RNG seed from a base seed plus
string/int context parts, so reruns are bit-identical regardless of
process, platform, or hash randomization (sha256, not built-in hash).
"""

import hashlib

import numpy as np


def derive_seed(base_seed: int, *parts) -> int:
    """Derive a child seed from a base seed and any hashable context parts.

    Args:
        base_seed: non-negative base seed.
        *parts: ints or strings identifying the consumer (e.g. shape id,
            epoch index, stage name).

    Returns:
        A seed in [0, 2**63) suitable for np.random.default_rng.
    """
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode("utf-8"))
    for p in parts:
        h.update(b"\x1f")  # unit separator: ("ab","c") != ("a","bc")
        h.update(str(p).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def make_rng(base_seed: int, *parts) -> np.random.Generator:
    """Generator seeded via derive_seed; convenience for pipeline stages."""
    return np.random.default_rng(derive_seed(base_seed, *parts))
