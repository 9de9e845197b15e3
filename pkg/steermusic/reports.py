"""Deterministic artifact writing: JSON, CSV, raw bytes.

Every report carries ``schema_version``. Writes are atomic (temp file in the
same directory, then rename), so a crash never leaves a half-written file.
"""

import csv
import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Union

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

PathLike = Union[str, Path]


def write_bytes(path: PathLike, payload: bytes) -> Path:
    """Atomically write ``payload`` to ``path``, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def to_jsonable(value: Any) -> Any:
    """Convert tuples, paths and non-finite floats into JSON-safe values."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if hasattr(value, 'item') and callable(value.item):
        return to_jsonable(value.item())
    return value


def dumps_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + '\n'


def write_json(path: PathLike, obj: Any) -> Path:
    return write_bytes(path, dumps_json(obj).encode('utf-8'))


def format_cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    """Write rows under a fixed header; extra keys in a row are an error."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        unknown = set(row) - set(columns)
        if unknown:
            raise ValueError(f'row has columns outside the schema: {sorted(unknown)}')
        writer.writerow([format_cell(row.get(c)) for c in columns])
    return write_bytes(path, buffer.getvalue().encode('utf-8'))


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


class ArtifactWriter:
    """Tracks the files one command writes so a failed run can be undone.

    The config echo is written first and is kept on failure; every other
    artifact is removed by ``discard``.
    """

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: List[Path] = []
        self.keep: List[Path] = []

    def path(self, name: str) -> Path:
        return self.root / name

    def _track(self, path: Path) -> Path:
        if path not in self.written:
            self.written.append(path)
        return path

    def echo_config(self, config: Mapping[str, Any], command: str, seed: int) -> Path:
        path = write_json(self.path(f'config.{command}.json'), {
            'schema_version': SCHEMA_VERSION,
            'command': command,
            'seed': seed,
            'config': config,
        })
        self.keep.append(path)
        return path

    def json(self, name: str, obj: Any) -> Path:
        if isinstance(obj, dict) and 'schema_version' not in obj:
            obj = {'schema_version': SCHEMA_VERSION, **obj}
        return self._track(write_json(self.path(name), obj))

    def csv(self, name: str, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
        return self._track(write_csv(self.path(name), columns, rows))

    def bytes(self, name: str, payload: bytes) -> Path:
        return self._track(write_bytes(self.path(name), payload))

    def adopt(self, path: PathLike) -> Path:
        """Register a file written by another helper."""
        return self._track(Path(path))

    def manifest(self, command: str, inputs: Mapping[str, Any], seed: int) -> Path:
        """Final run manifest listing inputs and every output (relative paths)."""
        outputs = sorted(p.relative_to(self.root).as_posix() for p in self.written
                         if p.is_relative_to(self.root))
        return self.json(f'run.{command}.json', {
            'command': command,
            'seed': seed,
            'inputs': dict(inputs),
            'outputs': outputs,
            'config_echo': f'config.{command}.json',
        })

    def discard(self) -> None:
        for path in reversed(self.written):
            if path in self.keep:
                continue
            try:
                path.unlink()
            except FileNotFoundError:
                pass
        logger.info(f'Removed {len(self.written)} partial output(s) under {self.root}')
        self.written = [p for p in self.written if p in self.keep]
