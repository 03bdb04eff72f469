"""Counter-based randomness.

Every random draw in the simulator and every down-sampling decision is a
pure function of ``(seed, id, tag)``, so results never depend on how a
stream is chunked or sharded.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

# stream tags; fixed forever, changing one changes every generated stream
TAG_KEEP_SKIP = 1
TAG_USER = 11
TAG_SEGMENT = 12
TAG_AD = 13
TAG_OUTCOME = 14
TAG_DWELL_A = 15
TAG_DWELL_B = 16
TAG_AUCTION_USER = 21
TAG_AUCTION_SEGMENT = 22
TAG_AUCTION_AD = 23
TAG_AUCTION_OUTCOME = 24


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, tag: int) -> np.ndarray:
    base = np.array([(int(seed) & _MASK64)], dtype=np.uint64)
    return _mix(_mix(base) + np.uint64(tag & _MASK64) * _GOLDEN)


def hashed_bits(seed: int, ids, tag: int) -> np.ndarray:
    """64-bit hash of each id under ``(seed, tag)``."""
    ids = np.asarray(ids, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        return _mix((ids * _GOLDEN) ^ _key(seed, tag))


def hashed_uniform(seed: int, ids, tag: int) -> np.ndarray:
    """Uniform draws in [0, 1) with 53 bits of resolution."""
    bits = hashed_bits(seed, ids, tag)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def hashed_index(seed: int, ids, tag: int, n: int) -> np.ndarray:
    """Uniform integers in [0, n)."""
    u = hashed_uniform(seed, ids, tag)
    return np.minimum((u * n).astype(np.int64), n - 1)


def stable_hash(*parts) -> int:
    """Process-independent 63-bit hash of a tuple of primitives."""
    text = "\x1f".join(f"{type(p).__name__}:{p}" for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)
