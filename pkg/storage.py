import hashlib
import json
import logging
import os
import shutil
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional

from models import DataLoadError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1.0"


def load_json(path: str) -> Any:
    """Read a JSON file, raising DataLoadError with the path on failure"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataLoadError(f"Could not read JSON from {path}: {e}") from e


def load_jsonl(path: str) -> List[Dict[str, Any]]:
    """Read newline-delimited JSON, skipping blank lines"""
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataLoadError(f"{path}:{number}: invalid JSON line: {e}") from e
    except OSError as e:
        raise DataLoadError(f"Could not read {path}: {e}") from e
    return rows


def file_digest(path: str) -> str:
    """sha256 of a file, or of every file under a directory in sorted order"""
    digest = hashlib.sha256()
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                full = os.path.join(root, name)
                digest.update(os.path.relpath(full, path).encode("utf-8"))
                with open(full, "rb") as f:
                    digest.update(f.read())
    else:
        with open(path, "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()


class ArtifactStorage:
    """Writes run artifacts under one output directory and can undo them"""

    def __init__(self, out_dir: str, keep_backups: bool = True):
        self.out_dir = out_dir
        self.keep_backups = keep_backups
        self.written: List[str] = []
        self._backups: Dict[str, str] = {}

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    def _prepare(self, name: str) -> str:
        path = self.path(name)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

        # Back up an existing artifact before overwriting it
        if os.path.exists(path) and path not in self._backups:
            if self.keep_backups and os.path.isfile(path):
                backup = f"{path}.backup"
                try:
                    shutil.copyfile(path, backup)
                    self._backups[path] = backup
                except OSError:
                    logger.warning("Could not back up %s before overwriting", path)
        return path

    def track(self, path: str) -> str:
        """Record a file written by someone else so rollback can remove it"""
        if path not in self.written:
            self.written.append(path)
        return path

    def reserve(self, name: str) -> str:
        """Return the path for an artifact written by another module, backed up and tracked"""
        return self.track(self._prepare(name))

    def save_text(self, name: str, text: str) -> str:
        path = self._prepare(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        return self.track(path)

    def save_json(self, name: str, data: Any) -> str:
        path = self._prepare(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2, ensure_ascii=False, default=_json_default)
            f.write("\n")
        return self.track(path)

    def save_jsonl(self, name: str, rows: Iterable[Dict[str, Any]]) -> str:
        path = self._prepare(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for row in rows:
                f.write(json.dumps(row, ensure_ascii=False, default=_json_default))
                f.write("\n")
        return self.track(path)

    def rollback(self) -> None:
        """Remove everything written by this storage, restoring backed-up originals"""
        for path in reversed(self.written):
            try:
                if os.path.isdir(path):
                    shutil.rmtree(path)
                elif os.path.exists(path):
                    os.remove(path)
                backup = self._backups.get(path)
                if backup and os.path.exists(backup):
                    shutil.move(backup, path)
            except OSError as e:
                logger.warning("Could not remove partial artifact %s: %s", path, e)
        self.written = []
        self._backups = {}

    def write_manifest(self, command: str, argv: List[str], inputs: Dict[str, Optional[str]],
                       seeds: Dict[str, Any], version: str) -> str:
        """Write manifest.json describing how to reproduce this run"""
        hashed = {}
        for label, path in sorted(inputs.items()):
            if path and os.path.exists(path):
                hashed[label] = {"path": path, "sha256": file_digest(path)}

        outputs = sorted(os.path.relpath(p, self.out_dir) for p in self.written)
        manifest = {
            "command": command,
            "argv": list(argv),
            "inputs": hashed,
            "seeds": seeds,
            "outputs": outputs,
            "metadata": {
                "version": MANIFEST_VERSION,
                "tool_version": version,
                "created": datetime.now().isoformat(),
            },
        }
        return self.save_json("manifest.json", manifest)


def _json_default(value: Any) -> Any:
    """Fallback encoder for numpy scalars, arrays and enums"""
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "value"):
        return value.value
    if hasattr(value, "isoformat"):
        return value.isoformat()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
