import json
import os

import pytest

from models import DataLoadError
from storage import ArtifactStorage, file_digest, load_json, load_jsonl


def test_load_json_reports_path(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataLoadError) as excinfo:
        load_json(str(bad))
    assert "bad.json" in str(excinfo.value)


def test_load_jsonl_skips_blank_lines(tmp_path):
    path = tmp_path / "rows.jsonl"
    path.write_text('{"a": 1}\n\n{"a": 2}\n')
    assert load_jsonl(str(path)) == [{"a": 1}, {"a": 2}]


def test_load_jsonl_invalid_line(tmp_path):
    path = tmp_path / "rows.jsonl"
    path.write_text('{"a": 1}\nnope\n')
    with pytest.raises(DataLoadError) as excinfo:
        load_jsonl(str(path))
    assert ":2:" in str(excinfo.value)


def test_save_and_load_artifacts(tmp_path):
    storage = ArtifactStorage(str(tmp_path))
    storage.save_json("report.json", {"score": 0.5})
    storage.save_jsonl("rows.jsonl", [{"turn": 0}, {"turn": 1}])
    storage.save_text("nested/notes.txt", "hello")

    assert load_json(str(tmp_path / "report.json")) == {"score": 0.5}
    assert load_jsonl(str(tmp_path / "rows.jsonl")) == [{"turn": 0}, {"turn": 1}]
    assert (tmp_path / "nested" / "notes.txt").read_text() == "hello"
    assert len(storage.written) == 3


def test_rollback_removes_new_files_and_restores_backups(tmp_path):
    existing = tmp_path / "report.json"
    existing.write_text('{"old": true}')
    storage = ArtifactStorage(str(tmp_path))
    storage.save_json("report.json", {"new": True})
    storage.save_text("extra.txt", "x")

    storage.rollback()

    assert json.loads(existing.read_text()) == {"old": True}
    assert not (tmp_path / "extra.txt").exists()
    assert not (tmp_path / "report.json.backup").exists()
    assert storage.written == []


def test_file_digest_is_stable_for_directories(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x.txt").write_text("1")
    (tmp_path / "a" / "y.txt").write_text("2")
    first = file_digest(str(tmp_path / "a"))
    assert first == file_digest(str(tmp_path / "a"))
    (tmp_path / "a" / "y.txt").write_text("3")
    assert first != file_digest(str(tmp_path / "a"))


def test_manifest_hashes_inputs_and_lists_outputs(tmp_path):
    source = tmp_path / "schema.yaml"
    source.write_text("dataset_name: d\n")
    out = tmp_path / "out"
    storage = ArtifactStorage(str(out))
    storage.save_text("result.txt", "done")
    path = storage.write_manifest("apply", ["apply", "x"], {"schema": str(source), "task": None}, {"seed": 0}, "1.0.0")

    manifest = load_json(path)
    assert manifest["command"] == "apply"
    assert manifest["inputs"]["schema"]["sha256"] == file_digest(str(source))
    assert "task" not in manifest["inputs"]
    assert manifest["outputs"] == ["result.txt"]
    assert manifest["metadata"]["tool_version"] == "1.0.0"
    assert os.path.basename(path) == "manifest.json"


def test_json_artifacts_accept_numpy_values(tmp_path):
    import numpy as np

    storage = ArtifactStorage(str(tmp_path))
    storage.save_json("v.json", {"x": np.int64(3), "y": np.array([1.5, 2.5])})
    assert load_json(str(tmp_path / "v.json")) == {"x": 3, "y": [1.5, 2.5]}
