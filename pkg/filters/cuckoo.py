"""
Cuckoo filter with partial-key cuckoo hashing
"""
import logging
import random
import struct
from typing import List, Tuple

import numpy as np

from filters.bloom import FilterFormatError
from filters.hashing import hash32, hash_pair
from filters.sizing import CUCKOO_BUCKET_SIZE, cuckoo_fpr_bound, cuckoo_size_for, next_power_of_two

logger = logging.getLogger(__name__)

CUCKOO_MAGIC = b'CKF1'
DEFAULT_MAX_KICKS = 500
_HEADER = struct.Struct('<4sQIIIQQ')


class CuckooFilter:
    """Fingerprint table with two candidate buckets per key; supports deletion.

    Fingerprint 0 marks an empty entry. A failed insert (max_kicks exhausted)
    undoes its displacement chain, leaving the filter as it was.
    """

    def __init__(self, bucket_count: int, bucket_size: int = CUCKOO_BUCKET_SIZE,
                 fingerprint_bits: int = 12, max_kicks: int = DEFAULT_MAX_KICKS, hash_seed: int = 0):
        if not 1 <= fingerprint_bits <= 32:
            raise ValueError(f"fingerprint_bits must lie in [1, 32], got {fingerprint_bits}")
        self.bucket_count = next_power_of_two(bucket_count)
        self.bucket_size = bucket_size
        self.fingerprint_bits = fingerprint_bits
        self.max_kicks = max_kicks
        self.hash_seed = hash_seed
        self.table = np.zeros((self.bucket_count, bucket_size), dtype=np.uint32)
        self.count = 0
        self._rng = random.Random(hash_seed)

    @classmethod
    def for_capacity(cls, n: int, epsilon: float, bucket_size: int = CUCKOO_BUCKET_SIZE,
                     max_kicks: int = DEFAULT_MAX_KICKS, hash_seed: int = 0) -> 'CuckooFilter':
        buckets, size, fingerprint = cuckoo_size_for(n, epsilon, bucket_size)
        return cls(buckets, size, fingerprint, max_kicks, hash_seed)

    @property
    def _mask(self) -> int:
        return self.bucket_count - 1

    def _fingerprint_and_index(self, key: bytes) -> Tuple[int, int]:
        h1, h2 = hash_pair(key, self.hash_seed)
        fingerprint = h2 & ((1 << self.fingerprint_bits) - 1)
        if fingerprint == 0:
            fingerprint = 1
        return fingerprint, h1 & self._mask

    def _alt_index(self, index: int, fingerprint: int) -> int:
        return (index ^ hash32(fingerprint.to_bytes(4, 'little'), self.hash_seed)) & self._mask

    def _candidates(self, key: bytes) -> Tuple[int, int, int]:
        fingerprint, i1 = self._fingerprint_and_index(key)
        return fingerprint, i1, self._alt_index(i1, fingerprint)

    def _place(self, index: int, fingerprint: int) -> bool:
        bucket = self.table[index]
        empty = np.flatnonzero(bucket == 0)
        if empty.size == 0:
            return False
        bucket[empty[0]] = fingerprint
        return True

    def insert(self, key: bytes) -> bool:
        fingerprint, i1, i2 = self._candidates(key)
        if self._place(i1, fingerprint) or self._place(i2, fingerprint):
            self.count += 1
            return True

        swaps: List[Tuple[int, int, int]] = []
        index = self._rng.choice((i1, i2))
        for _ in range(self.max_kicks):
            slot = self._rng.randrange(self.bucket_size)
            victim = int(self.table[index, slot])
            self.table[index, slot] = fingerprint
            swaps.append((index, slot, victim))
            fingerprint = victim
            index = self._alt_index(index, fingerprint)
            if self._place(index, fingerprint):
                self.count += 1
                return True

        for index, slot, victim in reversed(swaps):
            self.table[index, slot] = victim
        logger.debug(f"Cuckoo insert failed after {self.max_kicks} kicks (load {self.load_factor():.3f})")
        return False

    def query(self, key: bytes) -> bool:
        fingerprint, i1, i2 = self._candidates(key)
        return bool(np.any(self.table[i1] == fingerprint) or np.any(self.table[i2] == fingerprint))

    def __contains__(self, key: bytes) -> bool:
        return self.query(key)

    def delete(self, key: bytes) -> bool:
        fingerprint, i1, i2 = self._candidates(key)
        for index in (i1, i2):
            hits = np.flatnonzero(self.table[index] == fingerprint)
            if hits.size:
                self.table[index, hits[0]] = 0
                self.count -= 1
                return True
        return False

    def load_factor(self) -> float:
        return self.count / (self.bucket_count * self.bucket_size)

    @property
    def size_bits(self) -> int:
        return self.bucket_count * self.bucket_size * self.fingerprint_bits

    def fpr_bound(self) -> float:
        return cuckoo_fpr_bound(self.fingerprint_bits, self.bucket_size)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(CUCKOO_MAGIC, self.bucket_count, self.bucket_size,
                              self.fingerprint_bits, self.max_kicks, self.hash_seed, self.count)
        return header + self.table.astype('<u4').tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> 'CuckooFilter':
        if len(data) < _HEADER.size:
            raise FilterFormatError(f"cuckoo header truncated at offset {len(data)}")
        magic, buckets, size, fingerprint, kicks, seed, count = _HEADER.unpack_from(data, 0)
        if magic != CUCKOO_MAGIC:
            raise FilterFormatError(f"bad cuckoo magic {magic!r}")
        payload = data[_HEADER.size:]
        if len(payload) != buckets * size * 4:
            raise FilterFormatError(f"cuckoo payload is {len(payload)} bytes, expected {buckets * size * 4}")
        cuckoo = cls(buckets, size, fingerprint, kicks, seed)
        cuckoo.table = np.frombuffer(payload, dtype='<u4').reshape(buckets, size).astype(np.uint32)
        cuckoo.count = count
        return cuckoo

    def __repr__(self):
        return (f"<CuckooFilter: buckets={self.bucket_count}, bucket_size={self.bucket_size}, "
                f"fingerprint={self.fingerprint_bits}, load={self.load_factor():.3f}>")
