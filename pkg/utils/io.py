"""
File helpers: atomic writes, CSV/JSON emitters, and byte keys for items
"""
import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except Exception as e:
        logger.error(f"Failed to write {path}: {e}")
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def canonical_json(payload: Any) -> str:
    """Sorted keys, compact separators: the form used for hashing"""
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


def write_json(path: Union[str, Path], payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + '\n')


def format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ''
    return str(value)


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_cell(row.get(column)) for column in columns])
    return atomic_write_text(path, buffer.getvalue())


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline='', encoding='utf-8') as handle:
        return list(csv.DictReader(handle))


def item_key(item) -> bytes:
    """Byte string identifying an item for classical filters"""
    if isinstance(item, bytes):
        return item
    if isinstance(item, str):
        return item.encode('utf-8')
    return np.ascontiguousarray(item, dtype=np.float64).tobytes()


def item_keys(items) -> List[bytes]:
    return [item_key(item) for item in items]
