import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from models import DatasetSchema, FixtureError

logger = logging.getLogger(__name__)

FIXTURES_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")


@dataclass(frozen=True)
class Fixture:
    """A fixture dataset materialized on disk"""
    name: str
    root: str
    schema_path: str
    payload_files: List[str] = field(default_factory=list)
    transcript_path: Optional[str] = None
    actions_path: Optional[str] = None
    completion_path: Optional[str] = None
    tasks_path: Optional[str] = None
    expected: Dict[str, str] = field(default_factory=dict)

    @property
    def has_payloads(self) -> bool:
        return bool(self.payload_files)

    def schema(self) -> DatasetSchema:
        from schema_core import load_schema_file

        return load_schema_file(self.schema_path)

    def database(self):
        """Tables loaded relative to the fixture root"""
        from ingest_profile import load_database

        if not self.has_payloads:
            raise FixtureError(f"Fixture '{self.name}' ships a schema only")
        return load_database(self.schema(), self.root)

    def transcript(self) -> List[Dict[str, Any]]:
        from chat_client import load_transcript

        return load_transcript(self._require(self.transcript_path, "transcript"))

    def actions(self):
        from action_engine import load_action_script

        return load_action_script(self._require(self.actions_path, "action script"))

    def completion(self) -> str:
        with open(self._require(self.completion_path, "completion"), "r", encoding="utf-8") as f:
            return f.read()

    def tasks(self):
        from oracle_eval import load_tasks

        return load_tasks(self._require(self.tasks_path, "task file"))

    def expected_schema(self, key: str = "final_schema") -> DatasetSchema:
        from schema_core import load_schema_file

        return load_schema_file(self._require(self.expected.get(key), f"expected output '{key}'"))

    def _require(self, path: Optional[str], what: str) -> str:
        if path is None:
            raise FixtureError(f"Fixture '{self.name}' has no {what}")
        return path


class FixtureCatalog:
    """Known fixtures and where they live"""

    def __init__(self, root: Optional[str] = None):
        self.root = root or FIXTURES_DIR
        self._built_in = {
            "cot_paper_journal": "Paper/Journal tables behind the worked planning example (100 papers, 10 journals)",
            "avs_min": "History/Transaction schema snippet with a dummy Offer link (schema only)",
            "mag_mini": "Five small citation tables: paper, Cites, HasTopic, AffiliatedWith, Writes",
        }

    def names(self) -> List[str]:
        """Built-in fixture names that are present on disk"""
        return sorted(n for n in self._built_in if os.path.isdir(os.path.join(self.root, n)))

    def describe(self, name: str) -> str:
        if name not in self._built_in:
            raise FixtureError(self._unknown(name))
        return self._built_in[name]

    def source_dir(self, name: str) -> str:
        if name not in self._built_in:
            raise FixtureError(self._unknown(name))
        path = os.path.join(self.root, name)
        if not os.path.isfile(os.path.join(path, "schema.yaml")):
            raise FixtureError(f"Fixture '{name}' is missing from {self.root}")
        return path

    def _unknown(self, name: str) -> str:
        return f"Unknown fixture '{name}'. Available: {', '.join(sorted(self._built_in))}"

    def load(self, name: str, target_dir: Optional[str] = None) -> Fixture:
        """Copy a fixture under target_dir (a fresh temp dir by default) and describe the copy"""
        source = self.source_dir(name)
        base = target_dir or tempfile.mkdtemp(prefix=f"relgraph-{name}-")
        root = os.path.join(base, name)
        shutil.copytree(source, root, dirs_exist_ok=True)
        logger.debug("Materialized fixture %s under %s", name, root)
        return _describe(name, root)


def _optional(root: str, name: str) -> Optional[str]:
    path = os.path.join(root, name)
    return path if os.path.isfile(path) else None


def _describe(name: str, root: str) -> Fixture:
    payloads = []
    data_dir = os.path.join(root, "data")
    if os.path.isdir(data_dir):
        payloads = sorted(os.path.join(data_dir, f) for f in os.listdir(data_dir))

    expected = {}
    expected_dir = os.path.join(root, "expected")
    if os.path.isdir(expected_dir):
        for entry in sorted(os.listdir(expected_dir)):
            expected[os.path.splitext(entry)[0]] = os.path.join(expected_dir, entry)

    return Fixture(
        name=name,
        root=root,
        schema_path=os.path.join(root, "schema.yaml"),
        payload_files=payloads,
        transcript_path=_optional(root, "transcript.jsonl"),
        actions_path=_optional(root, "actions.json"),
        completion_path=_optional(root, "completion.txt"),
        tasks_path=_optional(root, "tasks.json"),
        expected=expected,
    )


def load_fixture(name: str, root: Optional[str] = None, target_dir: Optional[str] = None) -> Fixture:
    """Materialize a named fixture; raises FixtureError for unknown names"""
    return FixtureCatalog(root).load(name, target_dir)
