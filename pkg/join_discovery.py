import hashlib
import json
import logging
import re
import subprocess
from abc import ABC, abstractmethod
from collections import Counter
from itertools import combinations
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from models import (
    ColumnKey, ColumnProfile, DataType, DatasetSchema, EmbedderError, SimilarityMethod, SimilarityPair,
    hashable_cell, is_missing,
)

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 1024
DEFAULT_TOP_N = 20
EXCLUDED_DTYPES = (DataType.EMBEDDING, DataType.TIMESTAMP)

REPORT_LINE = ('The pair with the {ordinal} highest similarity is column "{a_column}" from Table "{a_table}" '
               'and column "{b_column}" from Table "{b_table}" with similarity {score:.3f}')
REPORT_PATTERN = re.compile(
    r'^The pair with the (\d+)(?:st|nd|rd|th) highest similarity is column "([^"]+)" from Table "([^"]+)" '
    r'and column "([^"]+)" from Table "([^"]+)" with similarity ([0-9.]+)$')


class Embedder(ABC):
    """Turns column serializations into unit-norm vectors"""

    dimension: int

    @abstractmethod
    def embed(self, text: str) -> np.ndarray:
        pass


class TrigramEmbedder(Embedder):
    """Hashed character-trigram counts, L2-normalized"""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise EmbedderError("Embedding dimension must be positive")
        self.dimension = dimension

    def _bucket(self, trigram: str) -> int:
        digest = hashlib.md5(trigram.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") % self.dimension

    def embed(self, text: str) -> np.ndarray:
        padded = f"#{text.lower()}#"
        vector = np.zeros(self.dimension, dtype=float)
        for i in range(len(padded) - 2):
            vector[self._bucket(padded[i:i + 3])] += 1.0
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector


class SubprocessEmbedder(Embedder):
    """Talks newline-delimited JSON to a long-lived embedding process"""

    def __init__(self, command: Sequence[str], dimension: Optional[int] = None):
        self.command = list(command)
        self.dimension = dimension
        self._next_id = 0
        try:
            self._process = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)
        except OSError as e:
            raise EmbedderError(f"Could not start embedder {self.command}: {e}") from e

    def embed(self, text: str) -> np.ndarray:
        self._next_id += 1
        request_id = self._next_id
        try:
            self._process.stdin.write(json.dumps({"id": request_id, "text": text}) + "\n")
            self._process.stdin.flush()
            line = self._process.stdout.readline()
        except (OSError, ValueError) as e:
            raise EmbedderError(f"Embedder transport failed: {e}") from e
        if not line:
            raise EmbedderError("Embedder closed its output stream")

        try:
            response = json.loads(line)
        except json.JSONDecodeError as e:
            raise EmbedderError(f"Embedder sent invalid JSON: {e}") from e
        if response.get("id") != request_id or not isinstance(response.get("vector"), list):
            raise EmbedderError(f"Unexpected embedder response: {line.strip()[:200]}")

        vector = np.asarray(response["vector"], dtype=float)
        if self.dimension is None:
            self.dimension = vector.size
        elif vector.size != self.dimension:
            raise EmbedderError(f"Embedder returned {vector.size} dimensions, expected {self.dimension}")
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector

    def close(self) -> None:
        if self._process.poll() is None:
            self._process.stdin.close()
            self._process.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def embed_text(text: str, embedder: Optional[Embedder] = None) -> np.ndarray:
    return (embedder or TrigramEmbedder()).embed(text)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity clamped into [0, 1]"""
    norm = np.linalg.norm(u) * np.linalg.norm(v)
    if norm == 0:
        return 0.0
    return float(min(1.0, max(0.0, np.dot(u, v) / norm)))


def _flatten(values: Sequence[Any]) -> List[Any]:
    flat = []
    for value in values:
        if isinstance(value, (list, tuple, np.ndarray)):
            flat.extend(hashable_cell(v) for v in value if not is_missing(v))
        elif not is_missing(value):
            flat.append(hashable_cell(value))
    return flat


def representative_values(values: Sequence[Any], k: int = 5) -> List[Any]:
    """The k most frequent distinct values; equal counts are ordered by their text"""
    counts = Counter(_flatten(values))
    ranked = sorted(counts.items(), key=lambda item: (-item[1], str(item[0])))
    return [value for value, _ in ranked[:k]]


def serialize_column_for_embedding(key: ColumnKey, profile: Optional[ColumnProfile],
                                   samples: Optional[Sequence[Any]] = None,
                                   dtype: Optional[DataType] = None) -> str:
    """Column-to-text form fed to the embedder"""
    if samples is None:
        samples = [] if profile is None else [s for s in profile.samples if not is_missing(s)]
    if dtype is None and profile is not None:
        from ingest_profile import infer_types
        dtype = infer_types({key.column: profile})[key.column].dtype

    type_name = dtype.value if dtype is not None else "unknown"
    rendered = ", ".join(str(s) for s in samples) if samples else "no samples"
    return f"{key.table}.{key.column} {type_name} values: {rendered}"


def overlap_score(values_a: Sequence[Any], values_b: Sequence[Any]) -> float:
    """Containment of the smaller distinct-value set in the larger one"""
    distinct_a = set(_flatten(values_a))
    distinct_b = set(_flatten(values_b))
    if not distinct_a or not distinct_b:
        return 0.0
    return len(distinct_a & distinct_b) / min(len(distinct_a), len(distinct_b))


def ordinal(n: int) -> str:
    if 10 <= n % 100 <= 20:
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def _candidate_columns(schema: DatasetSchema, profiles: Mapping[str, Mapping[str, ColumnProfile]]) -> List[ColumnKey]:
    keys = []
    for table in schema.tables:
        for column in table.columns:
            if column.dtype in EXCLUDED_DTYPES:
                continue
            if column.name not in profiles.get(table.name, {}):
                continue
            keys.append(ColumnKey(table.name, column.name))
    return keys


def _is_trivial_pair(schema: DatasetSchema, a: ColumnKey, b: ColumnKey) -> bool:
    """Pairs that are already linked, or a table's PK against its own FK columns"""
    col_a = schema.table(a.table).column(a.column)
    col_b = schema.table(b.table).column(b.column)
    if col_a.link_to == str(b) or col_b.link_to == str(a):
        return True
    if a.table == b.table and {col_a.dtype, col_b.dtype} == {DataType.PRIMARY_KEY, DataType.FOREIGN_KEY}:
        return True
    return False


def rank_pairs(schema: DatasetSchema, profiles: Mapping[str, Mapping[str, ColumnProfile]],
               method: SimilarityMethod = SimilarityMethod.EMBEDDING, top_n: int = DEFAULT_TOP_N,
               database=None, embedder: Optional[Embedder] = None) -> Tuple[List[SimilarityPair], str]:
    """Score every candidate column pair and render the ranked report"""
    if top_n <= 0:
        return [], ""
    if method == SimilarityMethod.OVERLAP and database is None:
        raise ValueError("The overlap method needs the table payloads")

    keys = _candidate_columns(schema, profiles)
    values: Dict[ColumnKey, list] = {}
    if database is not None:
        values = {key: database.decode(key.table, key.column) for key in keys}

    vectors: Dict[ColumnKey, np.ndarray] = {}
    if method == SimilarityMethod.EMBEDDING:
        embedder = embedder or TrigramEmbedder()
        for key in keys:
            profile = profiles[key.table][key.column]
            samples = representative_values(values[key]) if key in values else None
            dtype = schema.table(key.table).column(key.column).dtype
            vectors[key] = embedder.embed(serialize_column_for_embedding(key, profile, samples, dtype))

    pairs = []
    # keys are in declaration order, so combinations() yields oriented pairs
    for a, b in combinations(keys, 2):
        if _is_trivial_pair(schema, a, b):
            continue
        if method == SimilarityMethod.EMBEDDING:
            score = cosine_similarity(vectors[a], vectors[b])
        else:
            score = overlap_score(values[a], values[b])
        pairs.append(SimilarityPair(a, b, score, method))

    pairs.sort(key=lambda p: (-round(p.score, 12), p.a.table, p.a.column, p.b.table, p.b.column))
    pairs = pairs[:top_n]
    logger.debug("Ranked %d column pairs with %s similarity", len(pairs), method.value)
    return pairs, render_similarity_report(pairs)


def render_similarity_report(pairs: Sequence[SimilarityPair]) -> str:
    lines = [
        REPORT_LINE.format(ordinal=ordinal(i), a_column=p.a.column, a_table=p.a.table,
                           b_column=p.b.column, b_table=p.b.table, score=p.score)
        for i, p in enumerate(pairs, 1)
    ]
    return "\n".join(lines)


def parse_similarity_report(text: str) -> List[Tuple[ColumnKey, ColumnKey, float]]:
    """Recover (a, b, score) from each line of a similarity report"""
    parsed = []
    for line in text.splitlines():
        if not line.strip():
            continue
        match = REPORT_PATTERN.match(line.strip())
        if match is None:
            raise ValueError(f"Not a similarity report line: {line}")
        _, a_column, a_table, b_column, b_table, score = match.groups()
        parsed.append((ColumnKey(a_table, a_column), ColumnKey(b_table, b_column), float(score)))
    return parsed
