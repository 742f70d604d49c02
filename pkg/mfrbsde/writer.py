"""
Artifact emission for CLI runs: deterministic JSON and CSV files, each
checksummed, and a manifest written last. A directory without a manifest is
an aborted run.
"""

import csv
import hashlib
import io
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = "1.0"
OUTPUT_ROOT_ENV = "MFRBSDE_OUTPUT_ROOT"
MANIFEST_NAME = "manifest.json"


def resolve_output_dir(directory: str, root: Optional[str] = None) -> Path:
    """Relative directories are placed under $MFRBSDE_OUTPUT_ROOT when it is set."""
    path = Path(directory)
    root = root if root is not None else os.getenv(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def dumps_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]], units: Optional[Mapping[str, str]] = None) -> str:
    units = units or {}
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow([f"{c} [{units.get(c, '1')}]" for c in columns])
    for row in rows:
        out.writerow([_cell(v) for v in row])
    return buf.getvalue()


def config_hash(resolved: Mapping[str, Any]) -> str:
    return hashlib.sha256(dumps_json(resolved).encode("utf-8")).hexdigest()


class RunWriter:
    """Writes the files of one run and tracks their checksums for the manifest."""

    def __init__(self, directory: Path, formats: Sequence[str] = ("json", "csv")):
        self.directory = Path(directory)
        self.formats = set(formats)
        self.checksums: Dict[str, str] = {}
        self.directory.mkdir(parents=True, exist_ok=True)
        stale = self.directory / MANIFEST_NAME
        if stale.exists():
            stale.unlink()

    def _write(self, name: str, text: str) -> Path:
        if name == MANIFEST_NAME:
            raise ValidationError(f"'{MANIFEST_NAME}' is reserved for the run manifest")
        data = text.encode("utf-8")
        path = self.directory / name
        path.write_bytes(data)
        self.checksums[name] = hashlib.sha256(data).hexdigest()
        logger.debug("wrote %s (%d bytes)", path, len(data))
        return path

    def json(self, name: str, obj: Any, required: bool = False) -> Optional[Path]:
        if not required and "json" not in self.formats:
            return None
        return self._write(name, dumps_json(obj))

    def csv(
        self,
        name: str,
        columns: Sequence[str],
        rows: Iterable[Sequence[Any]],
        units: Optional[Mapping[str, str]] = None,
    ) -> Optional[Path]:
        if "csv" not in self.formats:
            return None
        return self._write(name, dumps_csv(columns, rows, units))

    def series(self, name: str, series: Mapping[str, np.ndarray], units: Optional[Mapping[str, str]] = None):
        columns = list(series)
        rows = zip(*(np.asarray(series[c]).tolist() for c in columns))
        return self.csv(name, columns, rows, units)

    def manifest(self, resolved_config: Mapping[str, Any], seed: int, wall_time: float, schema_version: int) -> Path:
        body = {
            "artifact_version": ARTIFACT_VERSION,
            "schema_version": schema_version,
            "config_hash": config_hash(resolved_config),
            "seed": seed,
            "wall_time_s": round(wall_time, 3),
            "files": dict(sorted(self.checksums.items())),
        }
        path = self.directory / MANIFEST_NAME
        path.write_text(dumps_json(body), encoding="utf-8")
        return path


def read_manifest(directory: Path) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise ValidationError(f"{directory} has no manifest: the run was aborted")
    return json.loads(path.read_text(encoding="utf-8"))


__all__ = [
    "ARTIFACT_VERSION",
    "OUTPUT_ROOT_ENV",
    "MANIFEST_NAME",
    "RunWriter",
    "resolve_output_dir",
    "dumps_json",
    "dumps_csv",
    "config_hash",
    "read_manifest",
]
