"""
Keyed 64-bit hashing with double hashing for filter bit positions
"""
from typing import List, Tuple

import mmh3

MASK64 = (1 << 64) - 1


def _fold_seed(seed: int) -> int:
    """mmh3 takes a 32-bit seed; fold the 64-bit filter seed into it"""
    seed &= MASK64
    return (seed ^ (seed >> 32)) & 0xFFFFFFFF


def hash_pair(key: bytes, seed: int) -> Tuple[int, int]:
    """Two independent unsigned 64-bit hashes of ``key``"""
    h1, h2 = mmh3.hash64(key, _fold_seed(seed), signed=False)
    return h1, h2


def bit_indices(key: bytes, seed: int, k: int, m: int) -> List[int]:
    """h_i(x) = h1(x) + i * h2(x) mod m for i in [0, k)"""
    h1, h2 = hash_pair(key, seed)
    h2 |= 1
    return [(h1 + i * h2) % m for i in range(k)]


def hash32(key: bytes, seed: int) -> int:
    return mmh3.hash(key, _fold_seed(seed), signed=False)
