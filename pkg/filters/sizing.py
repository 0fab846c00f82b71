"""
Analytical sizing and false-positive formulas for classical filters
"""
import math
from dataclasses import dataclass
from typing import Tuple

LOG2_E = math.log2(math.e)

CUCKOO_BUCKET_SIZE = 4
CUCKOO_LOAD_FACTOR = 0.95


@dataclass(frozen=True)
class FilterConfig:
    """Expected element count and target false-positive rate"""
    n: int
    epsilon: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


def bloom_size_for(n: int, epsilon: float) -> Tuple[int, int]:
    """(m bits, k hashes) for n elements at false-positive rate epsilon"""
    FilterConfig(n, epsilon)
    bits_per_key = math.log2(1.0 / epsilon)
    m = math.ceil(n * bits_per_key * LOG2_E)
    k = max(1, math.ceil(bits_per_key))
    return m, min(k, 64)


def analytical_fpr(m: int, n: int, k: int) -> float:
    """(1 - e^{-kn/m})^k"""
    if m < 1 or n < 1 or k < 1:
        raise ValueError(f"m, n, k must be >= 1, got {m}, {n}, {k}")
    return (1.0 - math.exp(-k * n / m)) ** k


def expected_fill(m: int, n: int, k: int) -> float:
    """Expected fraction of set bits after n inserts"""
    return 1.0 - math.exp(-k * n / m)


def optimal_space_bound(n: int, epsilon: float) -> float:
    """Information-theoretic lower bound n * log2(1/epsilon) bits"""
    FilterConfig(n, epsilon)
    return n * math.log2(1.0 / epsilon)


def cuckoo_fingerprint_bits(epsilon: float, bucket_size: int = CUCKOO_BUCKET_SIZE) -> int:
    return math.ceil(math.log2(1.0 / epsilon) + math.log2(2 * bucket_size))


def next_power_of_two(value: int) -> int:
    return 1 if value <= 1 else 1 << (value - 1).bit_length()


def cuckoo_size_for(n: int, epsilon: float, bucket_size: int = CUCKOO_BUCKET_SIZE,
                    load_factor: float = CUCKOO_LOAD_FACTOR) -> Tuple[int, int, int]:
    """(bucket_count, bucket_size, fingerprint_bits) for n elements at epsilon"""
    FilterConfig(n, epsilon)
    buckets = next_power_of_two(math.ceil(n / (bucket_size * load_factor)))
    return buckets, bucket_size, cuckoo_fingerprint_bits(epsilon, bucket_size)


def cuckoo_bits(n: int, epsilon: float, bucket_size: int = CUCKOO_BUCKET_SIZE) -> int:
    buckets, size, fingerprint = cuckoo_size_for(n, epsilon, bucket_size)
    return buckets * size * fingerprint


def cuckoo_fpr_bound(fingerprint_bits: int, bucket_size: int = CUCKOO_BUCKET_SIZE) -> float:
    """Upper bound 2b / 2^f on the cuckoo false-positive rate"""
    return min(1.0, 2.0 * bucket_size / (2 ** fingerprint_bits))
