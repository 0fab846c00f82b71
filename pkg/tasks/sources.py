"""
Dataset sources for episode generation: synthetic clusters and tokens,
IDX image files and newline-delimited token universes.
"""
import hashlib
import logging
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

SOURCE_KINDS = ('synthetic_clusters', 'synthetic_tokens', 'idx_images', 'token_file')
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
LOWERCASE = np.array(list(string.ascii_lowercase))

Items = Union[np.ndarray, List[str]]


class DatasetError(ValueError):
    """Raised when a dataset cannot supply what an episode needs"""


class ParseError(DatasetError):
    """Raised when a data file is malformed; carries the byte offset"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass
class SourceSpec:
    kind: str = 'synthetic_clusters'
    classes: int = 10
    dim: int = 16
    items_per_class: int = 500
    noise: float = 0.1
    token_count: int = 25000
    min_length: int = 4
    max_length: int = 12
    path: str = ''
    labels_path: str = ''
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}; expected one of {SOURCE_KINDS}")
        if self.classes < 1 or self.dim < 1 or self.items_per_class < 1 or self.token_count < 1:
            raise ValueError("source counts must be positive")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError(f"token lengths [{self.min_length}, {self.max_length}] are invalid")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")


@dataclass
class DatasetSource:
    """Items addressed by integer id; membership compares item values"""
    kind: str
    items: Items
    labels: Optional[np.ndarray] = None
    permutation: Optional[np.ndarray] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.permutation is None:
            seed = int(self.metadata.get('seed', 0))
            self.permutation = np.random.default_rng(seed).permutation(self.size)

    @property
    def size(self) -> int:
        return len(self.items)

    @property
    def is_dense(self) -> bool:
        return isinstance(self.items, np.ndarray)

    @property
    def dim(self) -> int:
        return int(self.items.shape[1]) if self.is_dense else 0

    def take(self, ids: Sequence[int]) -> Items:
        ids = np.asarray(ids, dtype=np.int64)
        if self.is_dense:
            return self.items[ids]
        return [self.items[i] for i in ids]

    def class_members(self) -> Dict[int, np.ndarray]:
        if self.labels is None:
            raise DatasetError(f"{self.kind} source has no class labels")
        return {int(label): np.flatnonzero(self.labels == label) for label in np.unique(self.labels)}

    def subset(self, ids: Sequence[int], name: str) -> 'DatasetSource':
        ids = np.asarray(ids, dtype=np.int64)
        labels = None if self.labels is None else self.labels[ids]
        metadata = {**self.metadata, 'split': name}
        return DatasetSource(self.kind, self.take(ids), labels, metadata=metadata)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        if self.is_dense:
            digest.update(np.ascontiguousarray(self.items, dtype='<f8').tobytes())
        else:
            digest.update('\n'.join(self.items).encode('utf-8'))
        if self.labels is not None:
            digest.update(np.ascontiguousarray(self.labels, dtype='<i8').tobytes())
        return digest.hexdigest()

    def manifest(self) -> Dict:
        return {
            'kind': self.kind,
            'seed': self.metadata.get('seed'),
            'items': self.size,
            'classes': 0 if self.labels is None else int(len(np.unique(self.labels))),
            'dim': self.dim,
            'checksum': self.checksum(),
            **{k: v for k, v in self.metadata.items() if k not in ('seed',)},
        }


def generate_clusters(classes: int, dim: int, items_per_class: int, noise: float,
                      seed: int = 0) -> DatasetSource:
    """C centres on the unit sphere, items = centre + N(0, noise^2) per coordinate"""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), items_per_class)
    items = centers[labels] + noise * rng.standard_normal((labels.size, dim))
    logger.info(f"Generated {labels.size} cluster items ({classes} classes, dim {dim}, noise {noise})")
    return DatasetSource('synthetic_clusters', items, labels, metadata={'seed': seed})


def generate_tokens(count: int, seed: int = 0, min_length: int = 4, max_length: int = 12) -> DatasetSource:
    """Sorted universe of ``count`` unique random lowercase strings"""
    rng = np.random.default_rng(seed)
    tokens = set()
    while len(tokens) < count:
        needed = count - len(tokens)
        lengths = rng.integers(min_length, max_length + 1, size=needed)
        for length in lengths:
            tokens.add(''.join(rng.choice(LOWERCASE, size=length)))
    universe = sorted(tokens, key=lambda token: token.encode('utf-8'))
    logger.info(f"Generated {len(universe)} synthetic tokens")
    return DatasetSource('synthetic_tokens', universe, metadata={'seed': seed})


def generate_synthetic(spec: SourceSpec) -> DatasetSource:
    if spec.kind == 'synthetic_clusters':
        return generate_clusters(spec.classes, spec.dim, spec.items_per_class, spec.noise, spec.seed)
    if spec.kind == 'synthetic_tokens':
        return generate_tokens(spec.token_count, spec.seed, spec.min_length, spec.max_length)
    raise DatasetError(f"{spec.kind} is not a synthetic source")


def parse_idx(data: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload"""
    if len(data) < 4:
        raise ParseError("IDX header truncated", len(data))
    (magic,) = struct.unpack_from('>I', data, 0)
    if magic != expected_magic:
        raise ParseError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    rank = magic & 0xFF
    header_end = 4 + 4 * rank
    if len(data) < header_end:
        raise ParseError("IDX dimension sizes truncated", len(data))
    dims = struct.unpack_from(f'>{rank}I', data, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) < header_end + count:
        raise ParseError(f"IDX payload truncated: need {count} bytes", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def _read_file(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    return path.read_bytes()


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path, None] = None,
             seed: int = 0) -> DatasetSource:
    """Labelled images flattened to [0, 1] vectors"""
    images = parse_idx(_read_file(images_path), IDX_IMAGES_MAGIC)
    items = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = None
    if labels_path:
        labels = parse_idx(_read_file(labels_path), IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != items.shape[0]:
            raise DatasetError(f"{labels.shape[0]} labels for {items.shape[0]} images")
    logger.info(f"Loaded {items.shape[0]} IDX images of shape {images.shape[1:]} from {images_path}")
    return DatasetSource('idx_images', items, labels,
                         metadata={'seed': seed, 'image_shape': list(images.shape[1:])})


def load_token_universe(path: Union[str, Path], seed: int = 0) -> DatasetSource:
    """Newline-delimited UTF-8 tokens, deduplicated and sorted bytewise"""
    data = _read_file(path)
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as e:
        raise ParseError(f"token file is not UTF-8: {e.reason}", e.start)
    raw = [line for line in text.splitlines() if line]
    if not raw:
        raise DatasetError(f"token file {path} is empty")
    universe = sorted(set(raw), key=lambda token: token.encode('utf-8'))
    duplicates = len(raw) - len(universe)
    logger.info(f"Loaded {len(universe)} unique tokens from {path} ({duplicates} duplicates removed)")
    return DatasetSource('token_file', universe, metadata={'seed': seed, 'duplicates_removed': duplicates})


def load_source(spec: SourceSpec) -> DatasetSource:
    if spec.kind in ('synthetic_clusters', 'synthetic_tokens'):
        return generate_synthetic(spec)
    if not spec.path:
        raise DatasetError(f"{spec.kind} source needs data.path")
    if spec.kind == 'idx_images':
        return load_idx(spec.path, spec.labels_path or None, spec.seed)
    return load_token_universe(spec.path, spec.seed)


def split(source: DatasetSource, test_fraction: float, seed: int = 0) -> Tuple[DatasetSource, DatasetSource]:
    """Disjoint train/test sources.

    Labelled sources are split per class; token universes are shuffled,
    cut, and each side re-sorted so range sampling still sees a sorted
    universe.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    if source.labels is not None:
        train_ids, test_ids = [], []
        for members in source.class_members().values():
            shuffled = rng.permutation(members)
            cut = int(round(len(shuffled) * test_fraction))
            test_ids.append(shuffled[:cut])
            train_ids.append(shuffled[cut:])
        train, test = np.sort(np.concatenate(train_ids)), np.sort(np.concatenate(test_ids))
    else:
        shuffled = rng.permutation(source.size)
        cut = int(round(source.size * test_fraction))
        test, train = np.sort(shuffled[:cut]), np.sort(shuffled[cut:])
    if len(train) == 0 or len(test) == 0:
        raise DatasetError(f"split of {source.size} items at {test_fraction} leaves an empty side")
    return source.subset(train, 'train'), source.subset(test, 'test')
