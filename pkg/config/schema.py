"""
Typed run configuration parsed from JSON documents plus --set overrides
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union, get_args, get_origin, get_type_hints

from models.baselines import LSTMConfig, MemNetConfig
from models.nbf import NBFConfig
from services.trainer import TrainConfig
from tasks.sampling import TaskSpec
from tasks.sources import SourceSpec
from utils.io import canonical_json

logger = logging.getLogger(__name__)

MODEL_KINDS = ('nbf', 'lstm', 'memnet')


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry"""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass
class EvalConfig:
    alpha: float = 0.01
    precision: int = 32
    query_budget: int = 50_000
    min_negatives: int = 10_000
    test_episodes: int = 20
    checkpoint: str = ''

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.precision not in (16, 32, 64):
            raise ValueError(f"precision must be 16, 32 or 64, got {self.precision}")
        if self.query_budget < 1000:
            raise ValueError(f"query_budget must be >= 1000, got {self.query_budget}")
        if self.min_negatives < 1 or self.test_episodes < 1:
            raise ValueError("min_negatives and test_episodes must be positive")


@dataclass
class SweepGrid:
    slots: List[int] = field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    word_sizes: List[int] = field(default_factory=lambda: [2, 4, 6, 8, 10])
    hidden_sizes: List[int] = field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    sphering_decays: List[float] = field(default_factory=lambda: [0.9, 0.95, 0.99])
    learning_rates: List[float] = field(default_factory=lambda: [1e-4, 5e-5])

    def __post_init__(self):
        for name in ('slots', 'word_sizes', 'hidden_sizes', 'sphering_decays', 'learning_rates'):
            if not getattr(self, name):
                raise ValueError(f"sweep axis {name} must not be empty")


@dataclass
class BenchConfig:
    batch_sizes: List[int] = field(default_factory=lambda: [1, 10_000])
    repeats: int = 5
    warmup: int = 1
    filters: List[str] = field(default_factory=lambda: ['bloom', 'cuckoo'])
    checkpoints: List[str] = field(default_factory=list)
    baseline_models: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.repeats < 5 or self.warmup < 1:
            raise ValueError("timing needs at least 5 repeats after at least 1 warm-up")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ValueError("batch_sizes must be positive")
        unknown = set(self.filters) - {'bloom', 'cuckoo'}
        if unknown:
            raise ValueError(f"unknown filters {sorted(unknown)}")
        unknown = set(self.baseline_models) - set(MODEL_KINDS)
        if unknown:
            raise ValueError(f"unknown baseline_models {sorted(unknown)}")


@dataclass
class CompareConfig:
    sizes: List[int] = field(default_factory=lambda: [50, 100, 250])
    checkpoints: List[str] = field(default_factory=list)
    measure_cuckoo: bool = True
    n_train: int = 0
    extrapolate_sizes: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("compare sizes must be positive")
        if self.extrapolate_sizes and max(self.extrapolate_sizes) <= self.n_train:
            raise ValueError("extrapolate_sizes must extend past n_train")


@dataclass
class RunConfig:
    seed: int = 0
    model: str = 'nbf'
    nbf: NBFConfig = field(default_factory=NBFConfig)
    lstm: LSTMConfig = field(default_factory=LSTMConfig)
    memnet: MemNetConfig = field(default_factory=MemNetConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    data: SourceSpec = field(default_factory=SourceSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepGrid = field(default_factory=SweepGrid)
    bench: BenchConfig = field(default_factory=BenchConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


def _type_name(tp) -> str:
    return getattr(tp, '__name__', str(tp))


def _coerce(value: Any, tp, key: str) -> Any:
    """Check a JSON value against a field annotation, building nested dataclasses"""
    origin = get_origin(tp)
    if origin is Union:
        options = [arg for arg in get_args(tp) if arg is not type(None)]
        if value is None:
            return None
        return _coerce(value, options[0], key)
    if origin in (list, List, Sequence):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        (item_type,) = get_args(tp) or (Any,)
        return [_coerce(item, item_type, f"{key}[{i}]") for i, item in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected an object, got {type(value).__name__}")
        return from_dict(tp, value, key)
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected bool, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected int, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected float, got {type(value).__name__}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected str, got {type(value).__name__}")
        return value
    raise ConfigError(key, f"unsupported field type {_type_name(tp)}")


def from_dict(cls, data: Dict[str, Any], prefix: str = ''):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(dotted, "unknown key")
        kwargs[key] = _coerce(value, hints[key], dotted)
    try:
        return cls(**kwargs)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(prefix or cls.__name__, str(e))


def to_dict(config) -> Dict[str, Any]:
    return dataclasses.asdict(config)


def parse_override(text: str):
    """'a.b=value' -> (['a', 'b'], value); values are JSON literals or bare strings"""
    if '=' not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key or any(not part for part in key.split('.')):
        raise ConfigError(key, "malformed override key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split('.'), value


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for text in overrides:
        parts, value = parse_override(text)
        node = document
        for depth, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError('.'.join(parts[:depth + 1]), "cannot override inside a non-object value")
            node = child
        node[parts[-1]] = value
    return document


def load_document(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError('config', f"config not found: {path}")
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError('', f"{path} is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ConfigError('', f"{path} must hold a JSON object")
    return document


def parse_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the JSON file, then overrides; validated as a whole"""
    document = apply_overrides(load_document(path), overrides)
    config = from_dict(RunConfig, document)
    logger.debug(f"Parsed config {config_hash(config)[:12]} from {path or '<defaults>'}")
    return config


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(canonical_json(to_dict(config)).encode('utf-8')).hexdigest()
