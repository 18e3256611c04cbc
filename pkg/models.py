import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class DataType(Enum):
    """Column data types of the schema language, valued by their canonical spelling"""
    PRIMARY_KEY = "primary_key"
    FOREIGN_KEY = "foreign_key"
    CATEGORY = "category"
    NUMERIC = "float"
    TEXT = "text"
    MULTI_CATEGORY = "multi_category"
    TIMESTAMP = "datetime"
    EMBEDDING = "embedding"

    @classmethod
    def parse(cls, spelling: str) -> "DataType":
        """Map any accepted spelling (canonical or alias) to a DataType"""
        key = str(spelling).strip().lower()
        if key not in _DTYPE_ALIASES:
            raise ValueError(f"Unknown dtype '{spelling}'")
        return _DTYPE_ALIASES[key]

    @property
    def is_key(self) -> bool:
        return self in (DataType.PRIMARY_KEY, DataType.FOREIGN_KEY)


_DTYPE_ALIASES = {
    "primary_key": DataType.PRIMARY_KEY,
    "foreign_key": DataType.FOREIGN_KEY,
    "category": DataType.CATEGORY,
    "categorical": DataType.CATEGORY,
    "numeric": DataType.NUMERIC,
    "float": DataType.NUMERIC,
    "text": DataType.TEXT,
    "multi_category": DataType.MULTI_CATEGORY,
    "set": DataType.MULTI_CATEGORY,
    "timestamp": DataType.TIMESTAMP,
    "datetime": DataType.TIMESTAMP,
    "embedding": DataType.EMBEDDING,
}


class TableFormat(Enum):
    """On-disk payload formats"""
    PARQUET = "parquet"
    CSV = "csv"
    NPZ = "npz"

    @classmethod
    def parse(cls, spelling: str) -> "TableFormat":
        key = str(spelling).strip().lower()
        if key in ("pqt", "parquet"):
            return cls.PARQUET
        if key == "csv":
            return cls.CSV
        if key == "npz":
            return cls.NPZ
        raise ValueError(f"Unknown table format '{spelling}'")

    @classmethod
    def from_source(cls, source: str) -> "TableFormat":
        """Guess the format from a file extension"""
        extension = os.path.splitext(source)[1].lstrip(".")
        return cls.parse(extension)

    @property
    def extension(self) -> str:
        return {"parquet": "pqt", "csv": "csv", "npz": "npz"}[self.value]


# Exceptions. Everything derives from ValueError so callers can catch one type.

class SchemaParseError(ValueError):
    """Schema text could not be parsed; carries the 1-based line/column when known"""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        location = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{location}")


class SchemaLinkError(ValueError):
    pass


class DataLoadError(ValueError):
    pass


class EmbedderError(ValueError):
    pass


class GraphBuildError(ValueError):
    pass


class MetapathError(ValueError):
    pass


class HomophilyError(ValueError):
    pass


class OracleError(ValueError):
    pass


class ChatTransportError(ValueError):
    pass


class PlannerError(ValueError):
    """Raised when every planner run failed; keeps the per-run causes"""

    def __init__(self, message: str, causes: Optional[Dict[str, str]] = None):
        self.causes = dict(causes or {})
        super().__init__(message)


class SessionError(ValueError):
    """Unrecoverable session failure; `state` is the last good session state"""

    def __init__(self, message: str, state: Any = None):
        self.state = state
        super().__init__(message)


class FixtureError(ValueError):
    pass


def is_missing(value: Any) -> bool:
    """True for None and float NaN cells"""
    if value is None:
        return True
    if isinstance(value, (float, np.floating)):
        return math.isnan(value)
    return False


def hashable_cell(value: Any) -> Any:
    """Hashable stand-in for a payload cell (lists become tuples, NaN becomes None)"""
    if isinstance(value, np.ndarray):
        return tuple(hashable_cell(v) for v in value.tolist())
    if isinstance(value, (list, tuple)):
        return tuple(hashable_cell(v) for v in value)
    if is_missing(value):
        return None
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass(frozen=True)
class ColumnDef:
    """One typed column of a table"""
    name: str
    dtype: DataType
    link_to: Optional[str] = None
    description: Optional[str] = None

    @property
    def is_primary_key(self) -> bool:
        return self.dtype == DataType.PRIMARY_KEY

    @property
    def is_foreign_key(self) -> bool:
        return self.dtype == DataType.FOREIGN_KEY

    @property
    def link_table(self) -> Optional[str]:
        return self.link_to.split(".", 1)[0] if self.link_to else None

    @property
    def link_column(self) -> Optional[str]:
        if not self.link_to or "." not in self.link_to:
            return None
        return self.link_to.split(".", 1)[1]


@dataclass(frozen=True)
class TableDef:
    """A declared table: payload location plus ordered column definitions"""
    name: str
    source: str
    format: TableFormat
    columns: Tuple[ColumnDef, ...] = ()
    time_column: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def column_names(self) -> List[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> Optional[ColumnDef]:
        for col in self.columns:
            if col.name == name:
                return col
        return None

    def has_column(self, name: str) -> bool:
        return self.column(name) is not None

    @property
    def primary_key(self) -> Optional[ColumnDef]:
        for col in self.columns:
            if col.is_primary_key:
                return col
        return None

    @property
    def foreign_keys(self) -> List[ColumnDef]:
        return [c for c in self.columns if c.is_foreign_key]

    def with_columns(self, columns: Iterable[ColumnDef]) -> "TableDef":
        return replace(self, columns=tuple(columns))

    def with_column(self, column: ColumnDef) -> "TableDef":
        """Replace the column of the same name, keeping its position"""
        return self.with_columns(column if c.name == column.name else c for c in self.columns)


@dataclass(frozen=True, order=True)
class DummyTableRef:
    """An implicit single-key table that only exists as a link_to target"""
    name: str
    key_column: str

    @property
    def key_ref(self) -> str:
        return f"{self.name}.{self.key_column}"


@dataclass(frozen=True)
class DatasetSchema:
    """A multi-table dataset description: declared tables plus derived dummy tables"""
    dataset_name: str
    tables: Tuple[TableDef, ...] = ()
    derived: Tuple[DummyTableRef, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        # derived has set semantics; keep one canonical order
        object.__setattr__(self, "derived", tuple(sorted(set(self.derived))))

    @property
    def table_names(self) -> List[str]:
        return [t.name for t in self.tables]

    @property
    def dummy_names(self) -> List[str]:
        return [d.name for d in self.derived]

    def table(self, name: str) -> Optional[TableDef]:
        for table in self.tables:
            if table.name == name:
                return table
        return None

    def dummy(self, name: str) -> Optional[DummyTableRef]:
        for dummy in self.derived:
            if dummy.name == name:
                return dummy
        return None

    def is_name_taken(self, name: str) -> bool:
        return self.table(name) is not None or self.dummy(name) is not None

    def inbound_links(self, target: str) -> List[Tuple[str, str]]:
        """(table, column) of every FK whose link_to names the given table"""
        return [(t.name, c.name) for t in self.tables for c in t.foreign_keys if c.link_table == target]

    def replace_table(self, table: TableDef) -> "DatasetSchema":
        return replace(self, tables=tuple(table if t.name == table.name else t for t in self.tables))

    def add_table(self, table: TableDef) -> "DatasetSchema":
        return replace(self, tables=self.tables + (table,))

    def with_derived(self, derived: Iterable[DummyTableRef]) -> "DatasetSchema":
        return replace(self, derived=tuple(derived))

    def without_dummy(self, name: str) -> "DatasetSchema":
        return self.with_derived(d for d in self.derived if d.name != name)


@dataclass(frozen=True)
class Violation:
    """One broken schema rule"""
    table: Optional[str]
    column: Optional[str]
    rule: str
    message: str

    def __str__(self) -> str:
        where = ".".join(p for p in (self.table, self.column) if p)
        return f"{self.rule} at {where or '<schema>'}: {self.message}"


@dataclass(frozen=True)
class TableData:
    """Row values of one table as equal-length column vectors"""
    table_name: str
    columns: Dict[str, list] = field(default_factory=dict)
    row_count: Optional[int] = None

    def __post_init__(self):
        lengths = {name: len(values) for name, values in self.columns.items()}
        if len(set(lengths.values())) > 1:
            raise DataLoadError(f"Table '{self.table_name}' has ragged columns: {lengths}")
        if self.row_count is None:
            object.__setattr__(self, "row_count", next(iter(lengths.values()), 0))
        elif lengths and self.row_count != next(iter(lengths.values())):
            raise DataLoadError(f"Table '{self.table_name}' row_count does not match its columns")

    @property
    def column_names(self) -> List[str]:
        return list(self.columns)

    def column(self, name: str) -> list:
        return self.columns[name]

    def with_column(self, name: str, values: Sequence, position: Optional[int] = None) -> "TableData":
        """Add or replace a column; new columns go to `position` (default: end)"""
        items = [(k, v) for k, v in self.columns.items() if k != name]
        if name in self.columns and position is None:
            position = list(self.columns).index(name)
        if position is None:
            position = len(items)
        items.insert(position, (name, list(values)))
        return TableData(self.table_name, dict(items), self.row_count)

    def without_columns(self, names: Iterable[str]) -> "TableData":
        drop = set(names)
        return TableData(self.table_name, {k: v for k, v in self.columns.items() if k not in drop}, self.row_count)

    def renamed(self, table_name: str, column_map: Optional[Dict[str, str]] = None) -> "TableData":
        column_map = column_map or {}
        columns = {column_map.get(k, k): v for k, v in self.columns.items()}
        return TableData(table_name, columns, self.row_count)


@dataclass(frozen=True)
class ColumnProfile:
    """Per-column statistics used by type inference and planner context"""
    total: int
    uniques: int
    nan_count: int
    mode: Any = None
    min: Any = None
    max: Any = None
    samples: Tuple[Any, ...] = ()
    is_multidimensional: bool = False
    expanded_uniques: Optional[int] = None
    is_list: bool = False

    @property
    def has_extrema(self) -> bool:
        return self.min is not None and self.max is not None


@dataclass(frozen=True)
class InferredType:
    dtype: DataType
    confidence: float
    description: str


@dataclass(frozen=True, order=True)
class ColumnKey:
    table: str
    column: str

    def __str__(self) -> str:
        return f"{self.table}.{self.column}"


class SimilarityMethod(Enum):
    EMBEDDING = "embedding"
    OVERLAP = "overlap"


@dataclass(frozen=True)
class SimilarityPair:
    """A scored, unordered column pair (a is the earlier column in declaration order)"""
    a: ColumnKey
    b: ColumnKey
    score: float
    method: SimilarityMethod


class ActionKind(Enum):
    """The closed action vocabulary of the planner"""
    GENERATE_OR_CONNECT_DUMMY_TABLE = "generate_or_connect_dummy_table"
    CONNECT_TWO_COLUMNS = "connect_two_columns"
    EXPLODE_MULTI_CATEGORY_COLUMN = "explode_multi_category_column"
    GENERATE_NON_DUMMY_TABLE = "generate_non_dummy_table"
    REMOVE_PRIMARY_KEY = "remove_primary_key"
    ADD_PRIMARY_KEY = "add_primary_key"
    NONE = "none"


REQUIRED_PARAMETERS: Dict[ActionKind, Tuple[str, ...]] = {
    ActionKind.GENERATE_OR_CONNECT_DUMMY_TABLE: ("base_table_name", "orig_col_name", "new_table_name", "new_col_name"),
    ActionKind.CONNECT_TWO_COLUMNS: ("table_1_name", "table_1_col_name", "table_2_name", "table_2_col_name"),
    ActionKind.EXPLODE_MULTI_CATEGORY_COLUMN: (
        "original_table", "multi_cat_col", "primary_key_column", "new_table_name", "new_col_name", "dtype"),
    ActionKind.GENERATE_NON_DUMMY_TABLE: ("base_table_name", "cols", "new_table_name"),
    ActionKind.REMOVE_PRIMARY_KEY: ("base_table_name", "col_name"),
    ActionKind.ADD_PRIMARY_KEY: ("base_table_name", "col_name"),
    ActionKind.NONE: (),
}


@dataclass(frozen=True)
class Action:
    """One schema transformation request"""
    kind: ActionKind
    parameters: Dict[str, Any] = field(default_factory=dict)
    explanation: str = ""

    @property
    def is_terminal(self) -> bool:
        return self.kind == ActionKind.NONE

    def missing_parameters(self) -> List[str]:
        return [p for p in REQUIRED_PARAMETERS[self.kind] if p not in self.parameters]

    def to_payload(self) -> Dict[str, Any]:
        """The `<selection>` entry form"""
        return {"explanation": self.explanation, "action": self.kind.value, "parameters": dict(self.parameters)}

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "Action":
        kind = ActionKind(str(payload.get("action", "")).strip())
        return cls(kind, dict(payload.get("parameters") or {}), str(payload.get("explanation", "")))

    @classmethod
    def none(cls, explanation: str = "") -> "Action":
        return cls(ActionKind.NONE, {}, explanation)


@dataclass(frozen=True)
class ActionError:
    """Machine-readable action failure, fed back to the planner"""
    code: str
    message: str
    field: Optional[str] = None
    step: Optional[int] = None

    def __str__(self) -> str:
        prefix = f"step {self.step}: " if self.step is not None else ""
        return f"{prefix}[{self.code}] {self.message}"
