"""
Named parameter arrays and the "NBF1" checkpoint container
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Set

import numpy as np

from utils.io import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'NBF1'


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be decoded or does not fit the model"""


class ParamStore:
    """Named real arrays shared by the encoder, controller and output networks.

    Arrays are frozen (read-only) once added, so a store can be shared by any
    number of concurrent forward passes. Updates produce a new store via
    replace(). Names listed in ``frozen`` hold state that training never
    touches: fixed address matrices, sphering statistics, seeds.
    """

    def __init__(self, arrays: Optional[Dict[str, np.ndarray]] = None, frozen: Iterable[str] = ()):
        self._arrays: Dict[str, np.ndarray] = {}
        self._frozen: Set[str] = set(frozen)
        for name, value in (arrays or {}).items():
            self._arrays[name] = self._freeze(value)

    @staticmethod
    def _freeze(value) -> np.ndarray:
        array = np.array(value, dtype=np.float64)
        array.flags.writeable = False
        return array

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}")

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def add(self, name: str, value, trainable: bool = True):
        """Register a new array (construction time only)"""
        if name in self._arrays:
            raise ValueError(f"parameter {name!r} already exists")
        self._arrays[name] = self._freeze(value)
        if not trainable:
            self._frozen.add(name)

    def names(self) -> List[str]:
        return list(self._arrays)

    def is_trainable(self, name: str) -> bool:
        return name in self._arrays and name not in self._frozen

    def trainable_names(self) -> List[str]:
        return [name for name in self._arrays if name not in self._frozen]

    @property
    def frozen(self) -> Set[str]:
        return set(self._frozen)

    def replace(self, updates: Dict[str, np.ndarray]) -> 'ParamStore':
        """A new store with some arrays swapped; untouched arrays are shared"""
        unknown = set(updates) - set(self._arrays)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        store = ParamStore(frozen=self._frozen)
        for name, value in self._arrays.items():
            if name in updates:
                new_value = self._freeze(updates[name])
                if new_value.shape != value.shape:
                    raise ValueError(f"{name}: shape {new_value.shape} != {value.shape}")
                store._arrays[name] = new_value
            else:
                store._arrays[name] = value
        return store

    def count(self, trainable_only: bool = True) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return int(sum(self._arrays[name].size for name in names))

    def to_bytes(self) -> bytes:
        chunks = [CHECKPOINT_MAGIC]
        for name, value in self._arrays.items():
            encoded = name.encode('utf-8')
            chunks.append(struct.pack('<Q', len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack('<Q', value.ndim))
            chunks.append(struct.pack(f'<{value.ndim}Q', *value.shape))
            chunks.append(value.astype('<f8').tobytes())
        return b''.join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, frozen: Iterable[str] = ()) -> 'ParamStore':
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
        store = cls(frozen=frozen)
        offset = 4
        try:
            while offset < len(data):
                (name_len,) = struct.unpack_from('<Q', data, offset)
                offset += 8
                name = data[offset:offset + name_len].decode('utf-8')
                offset += name_len
                (rank,) = struct.unpack_from('<Q', data, offset)
                offset += 8
                dims = struct.unpack_from(f'<{rank}Q', data, offset)
                offset += 8 * rank
                count = int(np.prod(dims, dtype=np.int64))
                end = offset + 8 * count
                if end > len(data):
                    raise CheckpointError(f"truncated values for {name!r} at offset {offset}")
                values = np.frombuffer(data[offset:end], dtype='<f8').reshape(dims)
                offset = end
                store._arrays[name] = cls._freeze(values)
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint at offset {offset}: {e}")
        return store

    def save(self, path) -> Path:
        path = Path(path)
        atomic_write_bytes(path, self.to_bytes())
        logger.info(f"Saved checkpoint with {len(self)} arrays to {path}")
        return path

    @classmethod
    def load(cls, path, frozen: Iterable[str] = ()) -> 'ParamStore':
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        store = cls.from_bytes(path.read_bytes(), frozen=frozen)
        logger.info(f"Loaded checkpoint with {len(store)} arrays from {path}")
        return store
