import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from action_engine import Database, _coerce_columns, apply_script, parse_action_script, write_database
from graph_builder import GraphMode, classify_tables
from models import (
    Action, ActionKind, ColumnDef, DataType, DatasetSchema, DummyTableRef, TableData, TableDef, TableFormat,
)
from oracle_eval import Task

logger = logging.getLogger(__name__)

FIELDS = ["databases", "vision", "language", "theory", "systems", "robotics", "security", "biology"]
PLANTED_METAPATH = ("Writes_rev", "Writes")


@dataclass(frozen=True)
class BenchSpec:
    """Knobs of one synthetic citation dataset"""
    seed: int = 0
    n_papers: int = 300
    n_authors: int = 60
    n_communities: int = 4
    authors_per_paper: int = 3
    n_batches: int = 3
    n_years: int = 4
    keywords_per_community: int = 5
    c1_renamed_fk: bool = True
    c2_self_induced: bool = True
    c3_edge_table_with_spurious_pk: bool = True
    c4_dual_tasks: bool = True
    flip_noise: float = 0.1
    cross_community: float = 0.1

    def __post_init__(self):
        if not any(self.challenges.values()):
            raise ValueError("At least one challenge must be enabled")
        if self.n_papers < 10 or self.n_authors < 10:
            raise ValueError("Tables need at least 10 rows")
        if self.n_communities < 2:
            raise ValueError("At least two communities are needed")
        if self.authors_per_paper < 1 or self.authors_per_paper > self.n_authors // self.n_communities:
            raise ValueError("authors_per_paper must fit inside one community")
        if not (0 <= self.flip_noise < 1 and 0 <= self.cross_community < 1):
            raise ValueError("flip_noise and cross_community must lie in [0, 1)")

    @property
    def challenges(self) -> Dict[str, bool]:
        return {
            "c1": self.c1_renamed_fk,
            "c2": self.c2_self_induced,
            "c3": self.c3_edge_table_with_spurious_pk,
            "c4": self.c4_dual_tasks,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BenchSpec":
        """Accepts field names, plus c1..c4 as short names for the challenge toggles"""
        short = {"c1": "c1_renamed_fk", "c2": "c2_self_induced", "c3": "c3_edge_table_with_spurious_pk",
                 "c4": "c4_dual_tasks"}
        known = {}
        for key, value in data.items():
            key = short.get(key, key)
            if key in cls.__dataclass_fields__:
                known[key] = value
        return cls(**known)


@dataclass(frozen=True)
class AnswerKey:
    """Ground truth for one generated dataset"""
    actions: Tuple[Action, ...]
    challenges: Tuple[str, ...]
    table_roles: Dict[str, str] = field(default_factory=dict)
    metapaths: Tuple[Tuple[str, ...], ...] = ()
    better_task: Optional[str] = None
    worse_task: Optional[str] = None

    def expected_counts(self) -> Dict[str, int]:
        counts = {c: 0 for c in sorted(set(self.challenges))}
        for challenge in self.challenges:
            counts[challenge] += 1
        return counts

    def to_dict(self) -> Dict[str, Any]:
        entries = []
        for action, challenge in zip(self.actions, self.challenges):
            entry = action.to_payload()
            entry["challenge"] = challenge
            entries.append(entry)
        return {
            "actions": entries,
            "table_roles": dict(self.table_roles),
            "metapaths": [list(p) for p in self.metapaths],
            "better_task": self.better_task,
            "worse_task": self.worse_task,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnswerKey":
        actions = parse_action_script({"actions": data["actions"]})
        challenges = tuple(str(entry.get("challenge", "")) for entry in data["actions"])
        return cls(tuple(actions), challenges, dict(data.get("table_roles", {})),
                   tuple(tuple(p) for p in data.get("metapaths", [])),
                   data.get("better_task"), data.get("worse_task"))


class SynthDataset(NamedTuple):
    schema: DatasetSchema
    database: Database
    tasks: List[Task]
    answer_key: AnswerKey


def _pick_authors(rng: np.random.Generator, spec: BenchSpec, community: int,
                  pools: List[np.ndarray]) -> List[int]:
    chosen = list(rng.choice(pools[community], size=spec.authors_per_paper, replace=False))
    for slot in range(len(chosen)):
        if rng.random() < spec.cross_community:
            candidate = int(rng.integers(spec.n_authors))
            if candidate not in chosen:
                chosen[slot] = candidate
    return [int(a) for a in chosen]


def _flip(rng: np.random.Generator, label: int, k: int, noise: float) -> int:
    if rng.random() < noise:
        return int((label + rng.integers(1, k)) % k)
    return label


def _field_name(community: int) -> str:
    return FIELDS[community] if community < len(FIELDS) else f"field_{community}"


def _paper_table(rng: np.random.Generator, spec: BenchSpec, communities: np.ndarray) -> Tuple[TableDef, TableData]:
    k = spec.n_communities
    columns = [ColumnDef("PaperID", DataType.PRIMARY_KEY), ColumnDef("Title", DataType.TEXT)]
    data: Dict[str, list] = {"PaperID": list(range(spec.n_papers))}
    data["Title"] = [f"Study {i} of {_field_name(int(c))} methods" for i, c in enumerate(communities)]

    if spec.c2_self_induced:
        columns.append(ColumnDef("Field", DataType.CATEGORY))
        data["Field"] = [_field_name(_flip(rng, int(c), k, 2 * spec.flip_noise)) for c in communities]
        columns.append(ColumnDef("Keywords", DataType.MULTI_CATEGORY))
        keywords = []
        for c in communities:
            size = int(rng.integers(2, 4))
            picks = rng.choice(spec.keywords_per_community, size=size, replace=False)
            keywords.append([f"kw_{int(c)}_{int(j)}" for j in sorted(picks)])
        data["Keywords"] = keywords

    columns.append(ColumnDef("Batch", DataType.CATEGORY))
    data["Batch"] = [f"batch_{int(b)}" for b in rng.integers(spec.n_batches, size=spec.n_papers)]
    columns.append(ColumnDef("Venue", DataType.CATEGORY))
    data["Venue"] = [f"venue_{_flip(rng, int(c), k, spec.flip_noise)}" for c in communities]
    if spec.c4_dual_tasks:
        columns.append(ColumnDef("Year", DataType.CATEGORY))
        data["Year"] = [2016 + int(y) for y in rng.integers(spec.n_years, size=spec.n_papers)]

    return (TableDef("Paper", "data/Paper.csv", TableFormat.CSV, tuple(columns)),
            TableData("Paper", data, spec.n_papers))


def _author_table(rng: np.random.Generator, spec: BenchSpec) -> Tuple[TableDef, TableData]:
    columns = (ColumnDef("AuthorID", DataType.PRIMARY_KEY), ColumnDef("Name", DataType.TEXT),
               ColumnDef("Affiliation", DataType.CATEGORY))
    data = {
        "AuthorID": list(range(spec.n_authors)),
        "Name": [f"Author {i:03d}" for i in range(spec.n_authors)],
        "Affiliation": [f"lab_{int(a)}" for a in rng.integers(8, size=spec.n_authors)],
    }
    return TableDef("Author", "data/Author.csv", TableFormat.CSV, columns), TableData("Author", data, spec.n_authors)


def _writes_table(spec: BenchSpec, authorship: List[List[int]]) -> Tuple[TableDef, TableData]:
    pairs = [(a, p) for p, authors in enumerate(authorship) for a in authors]
    paper_column = ColumnDef("PaperRef", DataType.CATEGORY) if spec.c1_renamed_fk else \
        ColumnDef("PaperID", DataType.FOREIGN_KEY, "Paper.PaperID")
    columns = [ColumnDef("AuthorID", DataType.FOREIGN_KEY, "Author.AuthorID"), paper_column]
    data = {"AuthorID": [a for a, _ in pairs], paper_column.name: [p for _, p in pairs]}
    if spec.c3_edge_table_with_spurious_pk:
        columns.insert(0, ColumnDef("WriteID", DataType.PRIMARY_KEY))
        data = {"WriteID": list(range(len(pairs))), **data}
    return (TableDef("Writes", "data/Writes.csv", TableFormat.CSV, tuple(columns)),
            TableData("Writes", data, len(pairs)))


def _key_actions(spec: BenchSpec) -> List[Tuple[Action, str]]:
    actions = []
    if spec.c1_renamed_fk:
        actions.append((Action(ActionKind.CONNECT_TWO_COLUMNS, {
            "table_1_name": "Writes", "table_1_col_name": "PaperRef",
            "table_2_name": "Paper", "table_2_col_name": "PaperID"},
            "PaperRef holds paper identifiers under another name"), "c1"))
    if spec.c3_edge_table_with_spurious_pk:
        actions.append((Action(ActionKind.REMOVE_PRIMARY_KEY, {"base_table_name": "Writes", "col_name": "WriteID"},
                               "Writes relates authors to papers; WriteID is a row counter"), "c3"))
    if spec.c2_self_induced:
        actions.append((Action(ActionKind.GENERATE_OR_CONNECT_DUMMY_TABLE, {
            "base_table_name": "Paper", "orig_col_name": "Field", "new_table_name": "Field", "new_col_name": "Field"},
            "Papers of the same field tend to share venues"), "c2"))
        actions.append((Action(ActionKind.EXPLODE_MULTI_CATEGORY_COLUMN, {
            "original_table": "Paper", "multi_cat_col": "Keywords", "primary_key_column": "PaperID",
            "new_table_name": "PaperKeyword", "new_col_name": "Keyword", "dtype": "foreign_key"},
            "Shared keywords connect related papers"), "c2"))
    return actions


def generate(spec: BenchSpec) -> SynthDataset:
    """Seeded dataset with the enabled challenges planted, plus its answer key"""
    rng = np.random.default_rng(spec.seed)
    k = spec.n_communities
    communities = rng.integers(k, size=spec.n_papers)
    pools = [np.flatnonzero(np.arange(spec.n_authors) % k == c) for c in range(k)]
    authorship = [_pick_authors(rng, spec, int(c), pools) for c in communities]

    paper_def, paper_data = _paper_table(rng, spec, communities)
    author_def, author_data = _author_table(rng, spec)
    writes_def, writes_data = _writes_table(spec, authorship)

    schema = DatasetSchema("synthetic_citations", (paper_def, author_def, writes_def))
    database = Database.from_tables(schema, {"Paper": paper_data, "Author": author_data, "Writes": writes_data})

    tasks = [Task("venue", "Paper", "Venue", seed=spec.seed, description="Predict the venue of a paper.",
                  metapaths=(PLANTED_METAPATH,))]
    if spec.c4_dual_tasks:
        tasks.append(Task("year", "Paper", "Year", seed=spec.seed,
                          description="Predict the publication year of a paper."))

    pairs = _key_actions(spec)
    result = apply_script(database, [a for a, _ in pairs])
    if result.error is not None:
        raise ValueError(f"Answer key does not replay on the generated schema: {result.error}")
    roles = {r.table: r.role.value for r in classify_tables(result.state.schema, GraphMode.ROW2NODE_EDGE)}

    key = AnswerKey(
        actions=tuple(a for a, _ in pairs),
        challenges=tuple(c for _, c in pairs),
        table_roles=roles,
        metapaths=(PLANTED_METAPATH,),
        better_task="venue" if spec.c4_dual_tasks else None,
        worse_task="year" if spec.c4_dual_tasks else None,
    )
    logger.info("Generated %s with %d papers, %d authors, %d authorship rows and %d key actions",
                schema.dataset_name, spec.n_papers, spec.n_authors, writes_data.row_count, len(key.actions))
    return SynthDataset(schema, database, tasks, key)


def write_dataset(dataset: SynthDataset, out_dir: str, storage=None) -> Dict[str, str]:
    """schema.yaml and data/*.csv, plus tasks.json and answer_key.json"""
    from storage import ArtifactStorage

    storage = storage or ArtifactStorage(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    write_database(dataset.database, out_dir, storage)
    return {
        "schema": storage.path("schema.yaml"),
        "tasks": storage.save_json("tasks.json", {"tasks": [t.to_dict() for t in dataset.tasks]}),
        "answer_key": storage.save_json("answer_key.json", dataset.answer_key.to_dict()),
    }


def _tokens(rng: np.random.Generator, prefix: str, count: int) -> List[str]:
    seen: List[str] = []
    while len(seen) < count:
        token = f"{prefix}{int(rng.integers(16 ** 6)):06x}"
        if token not in seen:
            seen.append(token)
    return seen


def _rename(database: Database, tables: Mapping[str, str], columns: Mapping[str, Mapping[str, str]],
            sources: Optional[Mapping[str, str]] = None) -> Database:
    """Apply table and column renames everywhere a name appears"""
    schema = database.schema

    def link(target: Optional[str]) -> Optional[str]:
        if not target:
            return target
        table, _, column = target.partition(".")
        return f"{tables.get(table, table)}.{columns.get(table, {}).get(column, column)}"

    new_tables, new_data = [], {}
    for table in schema.tables:
        column_map = dict(columns.get(table.name, {}))
        new_name = tables.get(table.name, table.name)
        if sources and table.name in sources:
            source = sources[table.name]
        else:
            directory = os.path.dirname(table.source)
            source = os.path.join(directory, f"{new_name}.{table.format.extension}")
        renamed_columns = tuple(replace(c, name=column_map.get(c.name, c.name), link_to=link(c.link_to))
                                for c in table.columns)
        time_column = column_map.get(table.time_column, table.time_column) if table.time_column else None
        new_tables.append(TableDef(new_name, source, table.format, renamed_columns, time_column))
        new_data[new_name] = database.tables[table.name].renamed(new_name, column_map)

    derived = [DummyTableRef(tables.get(d.name, d.name), columns.get(d.name, {}).get(d.key_column, d.key_column))
               for d in schema.derived]
    key_spaces = {tables.get(name, name): space for name, space in database.key_spaces.items()}
    return Database(DatasetSchema(schema.dataset_name, tuple(new_tables), tuple(derived)), new_data, key_spaces)


def anonymize(schema: DatasetSchema, database: Database, seed: int = 0) -> Tuple[DatasetSchema, Database, Dict[str, Any]]:
    """Replace every table and column name by an opaque token; values stay as they are"""
    rng = np.random.default_rng(seed)
    table_names = schema.table_names + schema.dummy_names
    table_tokens = dict(zip(table_names, _tokens(rng, "t", len(table_names))))

    column_tokens: Dict[str, Dict[str, str]] = {}
    for table in schema.tables:
        column_tokens[table.name] = dict(zip(table.column_names, _tokens(rng, "c", len(table.columns))))
    for dummy in schema.derived:
        column_tokens[dummy.name] = {dummy.key_column: _tokens(rng, "c", 1)[0]}

    name_map = {
        "tables": table_tokens,
        "columns": column_tokens,
        "sources": {t.name: t.source for t in schema.tables},
    }
    anonymized = _rename(replace(database, schema=schema), table_tokens, column_tokens)
    return anonymized.schema, anonymized, name_map


def restore_names(database: Database, name_map: Mapping[str, Any]) -> Database:
    tables = {token: name for name, token in name_map["tables"].items()}
    columns = {name_map["tables"][table]: {token: column for column, token in mapping.items()}
               for table, mapping in name_map["columns"].items()}
    sources = {name_map["tables"][table]: source for table, source in name_map.get("sources", {}).items()}
    return _rename(database, tables, columns, sources)


def _original_name(name: Any, name_map: Optional[Mapping[str, Any]]) -> str:
    if not name_map:
        return str(name)
    reverse = {token: original for original, token in name_map["tables"].items()}
    return reverse.get(str(name), str(name))


def _original_column(table: str, column: Any, name_map: Optional[Mapping[str, Any]]) -> str:
    if not name_map:
        return str(column)
    reverse = {token: name for name, token in name_map["columns"].get(table, {}).items()}
    return reverse.get(str(column), str(column))


def action_signature(action: Action, name_map: Optional[Mapping[str, Any]] = None) -> Tuple:
    """Kind plus the source columns an action touches; planner-chosen names are ignored"""
    p = action.parameters

    def col(table_param: str, column_param: str) -> Tuple[str, str]:
        table = _original_name(p.get(table_param, ""), name_map)
        return table, _original_column(table, p.get(column_param, ""), name_map)

    kind = action.kind
    if kind == ActionKind.CONNECT_TWO_COLUMNS:
        ends: FrozenSet = frozenset([col("table_1_name", "table_1_col_name"), col("table_2_name", "table_2_col_name")])
        return kind.value, ends
    if kind == ActionKind.GENERATE_OR_CONNECT_DUMMY_TABLE:
        return (kind.value,) + col("base_table_name", "orig_col_name")
    if kind == ActionKind.EXPLODE_MULTI_CATEGORY_COLUMN:
        return (kind.value,) + col("original_table", "multi_cat_col")
    if kind == ActionKind.GENERATE_NON_DUMMY_TABLE:
        table = _original_name(p.get("base_table_name", ""), name_map)
        moved = frozenset(_original_column(table, c, name_map) for c in _coerce_columns(p.get("cols")))
        return kind.value, table, moved
    if kind == ActionKind.REMOVE_PRIMARY_KEY:
        return (kind.value,) + col("base_table_name", "col_name")
    if kind == ActionKind.ADD_PRIMARY_KEY:
        return kind.value, _original_name(p.get("base_table_name", ""), name_map)
    return (kind.value,)


@dataclass(frozen=True)
class RecoveryReport:
    """Matched and expected key actions per challenge"""
    counts: Dict[str, Tuple[int, int]]

    @property
    def fractions(self) -> Dict[str, float]:
        return {c: (matched / expected if expected else 1.0) for c, (matched, expected) in self.counts.items()}

    def to_text(self) -> str:
        return "\n".join(f"{c}: {matched}/{expected}" for c, (matched, expected) in sorted(self.counts.items()))

    def to_dict(self) -> Dict[str, Any]:
        return {c: {"matched": m, "expected": e} for c, (m, e) in sorted(self.counts.items())}


def score_against_key(applied: Sequence[Action], key: AnswerKey,
                      name_map: Optional[Mapping[str, Any]] = None) -> RecoveryReport:
    """How many key actions the applied list reproduces, per challenge"""
    remaining: List[Tuple] = [action_signature(a, name_map) for a in applied]
    counts = {c: [0, n] for c, n in key.expected_counts().items()}
    for action, challenge in zip(key.actions, key.challenges):
        signature = action_signature(action)
        if signature in remaining:
            remaining.remove(signature)
            counts[challenge][0] += 1
    return RecoveryReport({c: (m, e) for c, (m, e) in counts.items()})
