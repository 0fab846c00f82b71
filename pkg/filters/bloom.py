"""
Classical Bloom filter over byte-string keys
"""
import logging
import struct
from typing import Iterable

from bitarray import bitarray

from filters.hashing import bit_indices
from filters.sizing import analytical_fpr, bloom_size_for

logger = logging.getLogger(__name__)

BLOOM_MAGIC = b'BLM1'
_HEADER = struct.Struct('<4sQIQQ')


class FilterFormatError(ValueError):
    """Raised when serialized filter bytes cannot be decoded"""


class BloomFilter:
    """m-bit vector with k double-hashed bit positions; OR-writes and AND-queries"""

    def __init__(self, m: int, k: int, hash_seed: int = 0):
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        if not 1 <= k <= 64:
            raise ValueError(f"k must lie in [1, 64], got {k}")
        self.m = m
        self.k = k
        self.hash_seed = hash_seed
        self.count = 0
        self.bits = bitarray(m, endian='little')
        self.bits.setall(0)

    @classmethod
    def for_capacity(cls, n: int, epsilon: float, hash_seed: int = 0) -> 'BloomFilter':
        m, k = bloom_size_for(n, epsilon)
        return cls(m, k, hash_seed)

    def insert(self, key: bytes):
        for index in bit_indices(key, self.hash_seed, self.k, self.m):
            self.bits[index] = 1
        self.count += 1

    def insert_many(self, keys: Iterable[bytes]):
        for key in keys:
            self.insert(key)

    def query(self, key: bytes) -> bool:
        bits = self.bits
        return all(bits[index] for index in bit_indices(key, self.hash_seed, self.k, self.m))

    def __contains__(self, key: bytes) -> bool:
        return self.query(key)

    def popcount(self) -> int:
        return self.bits.count(1)

    def fill_ratio(self) -> float:
        return self.popcount() / self.m

    def expected_fpr(self) -> float:
        """Analytical false-positive rate at the current insert count"""
        if self.count == 0:
            return 0.0
        return analytical_fpr(self.m, self.count, self.k)

    @property
    def size_bits(self) -> int:
        return self.m

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(BLOOM_MAGIC, self.m, self.k, self.hash_seed, self.count)
        return header + self.bits.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> 'BloomFilter':
        if len(data) < _HEADER.size:
            raise FilterFormatError(f"bloom header truncated at offset {len(data)}")
        magic, m, k, seed, count = _HEADER.unpack_from(data, 0)
        if magic != BLOOM_MAGIC:
            raise FilterFormatError(f"bad bloom magic {magic!r}")
        payload = data[_HEADER.size:]
        if len(payload) != (m + 7) // 8:
            raise FilterFormatError(f"bloom payload is {len(payload)} bytes, expected {(m + 7) // 8}")
        bloom = cls(m, k, seed)
        bits = bitarray(endian='little')
        bits.frombytes(payload)
        bloom.bits = bits[:m]
        bloom.count = count
        return bloom

    def __repr__(self):
        return f"<BloomFilter: m={self.m}, k={self.k}, count={self.count}, fill={self.fill_ratio():.3f}>"
