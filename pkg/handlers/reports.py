"""
Run manifests, result files and machine-readable error reports
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from config.schema import RunConfig, config_hash, to_dict
from utils.io import write_csv, write_json

logger = logging.getLogger(__name__)

TOOL_VERSION = '0.1.0'
MANIFEST_NAME = 'manifest.json'
ERROR_NAME = 'error.json'


@dataclass
class RunManifest:
    command: str
    seed: int
    config: Dict[str, Any]
    config_hash: str
    artifacts: Dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    status: str = 'running'

    @classmethod
    def for_run(cls, command: str, config: RunConfig) -> 'RunManifest':
        return cls(command, config.seed, to_dict(config), config_hash(config))


@dataclass
class TableResult:
    columns: Sequence[str]
    rows: List[Dict[str, Any]]


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    return write_json(Path(out_dir) / MANIFEST_NAME, asdict(manifest))


def write_report(results: Dict[str, Any], out_dir: Path, manifest: Optional[RunManifest] = None) -> Dict[str, str]:
    """Write each result as CSV (tables) or JSON (everything else), then the manifest.

    ``results`` maps file names to payloads; TableResult values become CSV.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create output directory {out_dir}: {e}")
        raise
    written = {}
    for name, payload in results.items():
        path = out_dir / name
        if isinstance(payload, TableResult):
            write_csv(path, payload.columns, payload.rows)
        else:
            write_json(path, payload)
        written[name] = str(path)
        logger.info(f"Wrote {path}")
    if manifest is not None:
        manifest.artifacts.update(written)
        manifest.status = 'complete'
        write_manifest(manifest, out_dir)
    return written


def write_error(out_dir: Path, error: BaseException, exit_code: int) -> Dict[str, Any]:
    payload = {'error': type(error).__name__, 'message': str(error), 'exit_code': exit_code}
    try:
        write_json(Path(out_dir) / ERROR_NAME, payload)
    except OSError as e:
        logger.error(f"Could not write {ERROR_NAME} to {out_dir}: {e}")
    return payload
