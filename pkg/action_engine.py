import ast
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from jsonschema import Draft7Validator

from models import (
    Action, ActionError, ActionKind, ColumnDef, DataLoadError, DataType, DatasetSchema, DummyTableRef, TableData,
    TableDef, hashable_cell, is_missing,
)
from validators import SchemaValidator, validate_schema

logger = logging.getLogger(__name__)

ACTION_ENTRY_SCHEMA = {
    "type": "object",
    "required": ["action"],
    "properties": {
        "explanation": {"type": "string"},
        "action": {"type": "string"},
        "parameters": {"type": "object"},
        "challenge": {"type": "string"},
    },
}

ACTION_SCRIPT_SCHEMA = {
    "oneOf": [
        {"type": "array", "items": ACTION_ENTRY_SCHEMA},
        {
            "type": "object",
            "required": ["actions"],
            "properties": {"actions": {"type": "array", "items": ACTION_ENTRY_SCHEMA}},
        },
    ],
}

PAIR_DTYPES = (DataType.TEXT, DataType.NUMERIC, DataType.TIMESTAMP)
EXPLODE_DTYPES = (DataType.FOREIGN_KEY, DataType.CATEGORY, DataType.TEXT, DataType.NUMERIC, DataType.TIMESTAMP)


@dataclass(frozen=True)
class Database:
    """Schema plus table payloads; FK columns into dummy tables hold integer codes into `key_spaces`"""
    schema: DatasetSchema
    tables: Dict[str, TableData] = field(default_factory=dict)
    key_spaces: Dict[str, Tuple[Any, ...]] = field(default_factory=dict)

    @classmethod
    def from_tables(cls, schema: DatasetSchema, tables: Mapping[str, TableData]) -> "Database":
        """Build key spaces over inbound FKs (declaration order, first occurrence) and encode them"""
        tables = dict(tables)
        key_spaces: Dict[str, Tuple[Any, ...]] = {}

        for dummy in schema.derived:
            space: List[Any] = []
            index: Dict[Any, int] = {}
            for table_name, column_name in schema.inbound_links(dummy.name):
                codes = _encode(tables[table_name].column(column_name), space, index)
                tables[table_name] = tables[table_name].with_column(column_name, codes)
            key_spaces[dummy.name] = tuple(space)

        return cls(schema, tables, key_spaces)

    def table(self, name: str) -> TableData:
        return self.tables[name]

    def row_count(self, name: str) -> int:
        """Rows of a declared table, or keys of a dummy table"""
        if name in self.tables:
            return self.tables[name].row_count
        return len(self.key_spaces.get(name, ()))

    def links_to_dummy(self, table: str, column: str) -> bool:
        column_def = self.schema.table(table).column(column)
        return column_def.is_foreign_key and self.schema.dummy(column_def.link_table) is not None

    def decode(self, table: str, column: str) -> list:
        """Raw values of a column, translating dummy-table codes back"""
        values = self.tables[table].column(column)
        if not self.links_to_dummy(table, column):
            return list(values)
        space = self.key_spaces[self.schema.table(table).column(column).link_table]
        return [None if v is None else space[v] for v in values]

    def decoded_table(self, name: str) -> TableData:
        table = self.tables[name]
        return TableData(name, {c: self.decode(name, c) for c in table.column_names}, table.row_count)


@dataclass(frozen=True)
class ApplyResult:
    """Outcome of one action or script; on error `state` is the last good state"""
    state: Database
    log: Tuple[str, ...] = ()
    error: Optional[ActionError] = None
    warnings: Tuple[str, ...] = ()
    terminal: bool = False
    steps: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def schema_after(self) -> DatasetSchema:
        return self.state.schema

    @property
    def data_after(self) -> Dict[str, TableData]:
        return self.state.tables


class _ActionFailure(Exception):
    def __init__(self, code: str, message: str, field_name: Optional[str] = None):
        super().__init__(message)
        self.error = ActionError(code, message, field_name)


def _fail(code: str, message: str, field_name: Optional[str] = None):
    raise _ActionFailure(code, message, field_name)


def _encode(values: Sequence[Any], space: List[Any], index: Dict[Any, int]) -> List[Optional[int]]:
    """Map raw values to codes in `space`, appending unseen values"""
    codes = []
    for value in values:
        if is_missing(value):
            codes.append(None)
            continue
        key = hashable_cell(value)
        if key not in index:
            index[key] = len(space)
            space.append(key)
        codes.append(index[key])
    return codes


def _match_key(value: Any) -> str:
    """Text form used to match values across columns of different dtypes"""
    value = hashable_cell(value)
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value).strip()


def _fresh_name(schema: DatasetSchema, base: str) -> str:
    name, suffix = base, 1
    while schema.is_name_taken(name):
        name = f"{base}_{suffix}"
        suffix += 1
    return name


def _sibling_source(table: TableDef, new_name: str) -> str:
    directory = os.path.dirname(table.source)
    return os.path.join(directory, f"{new_name}.{table.format.extension}") if directory else \
        f"{new_name}.{table.format.extension}"


class _Draft:
    """Mutable working copy of a Database used while one action runs"""

    def __init__(self, state: Database):
        self.schema = state.schema
        self.tables = dict(state.tables)
        self.key_spaces = {name: list(space) for name, space in state.key_spaces.items()}
        self.log: List[str] = []
        self.warnings: List[str] = []

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def table(self, name: Any, field_name: str) -> TableDef:
        table = self.schema.table(str(name))
        if table is None:
            _fail("unknown-table", f"Table '{name}' does not exist", field_name)
        return table

    def column(self, table: TableDef, name: Any, field_name: str) -> ColumnDef:
        column = table.column(str(name))
        if column is None:
            _fail("unknown-column", f"Column '{name}' does not exist in table '{table.name}'", field_name)
        return column

    def identifier(self, name: Any, field_name: str) -> str:
        is_valid, error = SchemaValidator.validate_identifier(name, field_name)
        if not is_valid:
            _fail("invalid-identifier", error, field_name)
        return str(name)

    def raw_values(self, table_name: str, column_name: str) -> list:
        column = self.schema.table(table_name).column(column_name)
        values = self.tables[table_name].column(column_name)
        if column.is_foreign_key and column.link_table in self.key_spaces:
            space = self.key_spaces[column.link_table]
            return [None if v is None else space[v] for v in values]
        return list(values)

    def set_column(self, table_name: str, column: ColumnDef, values: Sequence[Any],
                   position: Optional[int] = None) -> None:
        table = self.schema.table(table_name)
        if table.has_column(column.name):
            new_table = table.with_column(column)
            position = None
        else:
            columns = list(table.columns)
            columns.insert(len(columns) if position is None else position, column)
            new_table = table.with_columns(columns)
        self.schema = self.schema.replace_table(new_table)
        self.tables[table_name] = self.tables[table_name].with_column(column.name, values, position)

    def drop_columns(self, table_name: str, names: Sequence[str]) -> None:
        table = self.schema.table(table_name)
        self.schema = self.schema.replace_table(table.with_columns(c for c in table.columns if c.name not in names))
        self.tables[table_name] = self.tables[table_name].without_columns(names)

    def add_table(self, table: TableDef, data: TableData) -> None:
        self.schema = self.schema.add_table(table)
        self.tables[table.name] = data

    def link_to_dummy(self, table_name: str, column_name: str, raw: Sequence[Any], dummy: str, key_column: str,
                      position: Optional[int] = None) -> None:
        if self.schema.table(dummy) is not None:
            _fail("name-collision", f"'{dummy}' is already a declared table", "new_table_name")
        existing = self.schema.dummy(dummy)
        if existing is not None and existing.key_column != key_column:
            _fail("dummy-key-mismatch",
                  f"Dummy table '{dummy}' is keyed by '{existing.key_column}', not '{key_column}'", "new_col_name")

        space = self.key_spaces.setdefault(dummy, [])
        index = {value: i for i, value in enumerate(space)}
        before = len(space)
        codes = _encode(raw, space, index)
        if existing is None:
            self.schema = self.schema.with_derived(self.schema.derived + (DummyTableRef(dummy, key_column),))

        old = self.schema.table(table_name).column(column_name)
        description = old.description if old is not None else None
        link = ColumnDef(column_name, DataType.FOREIGN_KEY, f"{dummy}.{key_column}", description)
        self.set_column(table_name, link, codes, position)
        verb = "joined" if existing is not None else "created"
        self.log.append(f"{table_name}.{column_name} -> {dummy}.{key_column} ({verb} dummy table, "
                        f"{len(space)} keys, {len(space) - before} new)")

    def link_to_table(self, table_name: str, column_name: str, raw: Sequence[Any], target: str,
                      via: Optional[str] = None) -> None:
        target_table = self.schema.table(target)
        primary_key = target_table.primary_key
        via = via or primary_key.name

        lookup: Dict[str, Any] = {}
        for key_value, pk_value in zip(self.raw_values(target, via), self.tables[target].column(primary_key.name)):
            if not is_missing(key_value):
                lookup.setdefault(_match_key(key_value), pk_value)

        linked, unmatched = [], 0
        for value in raw:
            if is_missing(value):
                linked.append(None)
                continue
            match = lookup.get(_match_key(value))
            if match is None:
                unmatched += 1
            linked.append(match)

        if unmatched:
            self.warn(f"{unmatched} values of {table_name}.{column_name} have no match in "
                      f"{target}.{via}; they become null links")

        old = self.schema.table(table_name).column(column_name)
        link = ColumnDef(column_name, DataType.FOREIGN_KEY, f"{target}.{primary_key.name}",
                         old.description if old is not None else None)
        self.set_column(table_name, link, linked)
        self.log.append(f"{table_name}.{column_name} -> {target}.{primary_key.name} (matched on {target}.{via})")

    def relink(self, table_name: str, column_name: str, raw: Sequence[Any], target: str) -> None:
        dummy = self.schema.dummy(target)
        if dummy is not None:
            self.link_to_dummy(table_name, column_name, raw, dummy.name, dummy.key_column)
        else:
            self.link_to_table(table_name, column_name, raw, target)

    def absorb(self, source: str, destination: str) -> None:
        """Point every FK of `source` at `destination`; a dummy source disappears afterwards"""
        for table_name, column_name in self.schema.inbound_links(source):
            raw = self.raw_values(table_name, column_name)
            self.relink(table_name, column_name, raw, destination)
        if self.schema.dummy(source) is not None:
            self.schema = self.schema.without_dummy(source)
            self.key_spaces.pop(source, None)
            self.log.append(f"Dummy table {source} merged into {destination}")
        else:
            self.log.append(f"Links to {source} redirected to {destination}; {source} keeps its attributes")

    def finish(self) -> Database:
        live = set(self.schema.dummy_names)
        spaces = {name: tuple(space) for name, space in self.key_spaces.items() if name in live}
        return Database(self.schema, self.tables, spaces)


def _text(parameters: Mapping[str, Any], name: str) -> str:
    value = parameters.get(name)
    return "" if value is None else str(value).strip()


def _coerce_columns(value: Any) -> List[str]:
    """Accept a list, a JSON/Python list literal or a comma-separated string"""
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value if str(v).strip()]
    text = str(value or "").strip()
    if not text:
        return []
    for loader in (json.loads, ast.literal_eval):
        try:
            parsed = loader(text)
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            continue
        if isinstance(parsed, (list, tuple)):
            return [str(v).strip() for v in parsed if str(v).strip()]
        if isinstance(parsed, str):
            return [parsed.strip()] if parsed.strip() else []
    return [part.strip().strip("'\"") for part in text.split(",") if part.strip()]


def _dummy_action(draft: _Draft, p: Mapping[str, Any]) -> None:
    table = draft.table(_text(p, "base_table_name"), "base_table_name")
    column = draft.column(table, _text(p, "orig_col_name"), "orig_col_name")
    new_table = draft.identifier(_text(p, "new_table_name"), "new_table_name")
    new_col = draft.identifier(_text(p, "new_col_name"), "new_col_name")

    if column.is_foreign_key:
        if column.link_to == f"{new_table}.{new_col}":
            draft.log.append(f"{table.name}.{column.name} already links to {new_table}.{new_col}")
            return
        _fail("already-foreign-key", f"{table.name}.{column.name} is already a foreign key to {column.link_to}",
              "orig_col_name")
    if column.dtype != DataType.CATEGORY:
        _fail("not-category", "orig_col_name must be a column with category type", "orig_col_name")

    draft.link_to_dummy(table.name, column.name, draft.raw_values(table.name, column.name), new_table, new_col)


def _connect_action(draft: _Draft, p: Mapping[str, Any]) -> None:
    table_1 = draft.table(_text(p, "table_1_name"), "table_1_name")
    col_1 = draft.column(table_1, _text(p, "table_1_col_name"), "table_1_col_name")
    table_2 = draft.table(_text(p, "table_2_name"), "table_2_name")
    col_2 = draft.column(table_2, _text(p, "table_2_col_name"), "table_2_col_name")

    if (table_1.name, col_1.name) == (table_2.name, col_2.name):
        _fail("self-connection", "A column cannot be connected to itself", "table_2_col_name")
    if col_2.dtype in (DataType.EMBEDDING, DataType.MULTI_CATEGORY):
        _fail("incompatible-dtype", f"{table_2.name}.{col_2.name} has dtype {col_2.dtype.value}, which cannot "
              "take part in a key relationship", "table_2_col_name")

    if col_1.is_foreign_key:
        _merge_into_target(draft, table_1, col_1, table_2, col_2)
        return
    if col_1.dtype != DataType.CATEGORY:
        _fail("not-category", "table_1_col_name must be a column with category type (or a foreign key)",
              "table_1_col_name")

    raw_1 = draft.raw_values(table_1.name, col_1.name)
    if col_2.dtype == DataType.CATEGORY:
        dummy = _text(p, "new_table_name") or _fresh_name(draft.schema, col_2.name)
        dummy = draft.identifier(dummy, "new_table_name")
        key = draft.identifier(_text(p, "new_table_col_name") or col_2.name, "new_table_col_name")
        raw_2 = draft.raw_values(table_2.name, col_2.name)
        draft.link_to_dummy(table_1.name, col_1.name, raw_1, dummy, key)
        draft.link_to_dummy(table_2.name, col_2.name, raw_2, dummy, key)
    elif col_2.is_primary_key:
        draft.link_to_table(table_1.name, col_1.name, raw_1, table_2.name)
    elif col_2.is_foreign_key:
        draft.relink(table_1.name, col_1.name, raw_1, col_2.link_table)
    elif col_2.dtype in PAIR_DTYPES:
        _connect_through_value_column(draft, p, table_1, col_1, table_2, col_2)
    else:
        _fail("incompatible-dtype", f"Cannot connect {col_1.dtype.value} to {col_2.dtype.value}", "table_2_col_name")


def _connect_through_value_column(draft: _Draft, p: Mapping[str, Any], table_1: TableDef, col_1: ColumnDef,
                                  table_2: TableDef, col_2: ColumnDef) -> None:
    raw_1 = draft.raw_values(table_1.name, col_1.name)
    raw_2 = draft.raw_values(table_2.name, col_2.name)
    present = [v for v in raw_2 if not is_missing(v)]
    determines_pk = len(present) == len(raw_2) and len({_match_key(v) for v in present}) == len(raw_2)

    if table_2.primary_key is not None and determines_pk:
        draft.link_to_table(table_1.name, col_1.name, raw_1, table_2.name, via=col_2.name)
        return

    # Surrogate key: a dummy over distinct(c2), extended by c1's extra values
    dummy = draft.identifier(_text(p, "new_table_name") or _fresh_name(draft.schema, col_2.name), "new_table_name")
    key = draft.identifier(_text(p, "new_table_col_name") or col_2.name, "new_table_col_name")
    draft.link_to_dummy(table_2.name, col_2.name, raw_2, dummy, key)
    draft.link_to_dummy(table_1.name, col_1.name, raw_1, dummy, key)


def _merge_into_target(draft: _Draft, table_1: TableDef, col_1: ColumnDef, table_2: TableDef,
                       col_2: ColumnDef) -> None:
    target = col_1.link_table

    if col_2.is_foreign_key:
        if col_2.link_table == target:
            draft.log.append(f"{table_2.name}.{col_2.name} already shares the target {target}")
            return
        draft.absorb(col_2.link_table, target)
    elif col_2.is_primary_key:
        if table_2.name == target:
            draft.log.append(f"{table_1.name}.{col_1.name} already links to {table_2.name}")
            return
        if draft.schema.dummy(target) is not None:
            draft.absorb(target, table_2.name)
        else:
            draft.absorb(table_2.name, target)
    else:
        draft.relink(table_2.name, col_2.name, draft.raw_values(table_2.name, col_2.name), target)
    draft.log.append(f"Merged the link targets of {table_1.name}.{col_1.name} and {table_2.name}.{col_2.name}")


def _explode_action(draft: _Draft, p: Mapping[str, Any]) -> None:
    table = draft.table(_text(p, "original_table"), "original_table")
    column = draft.column(table, _text(p, "multi_cat_col"), "multi_cat_col")
    if column.dtype != DataType.MULTI_CATEGORY:
        _fail("not-multi-category", f"{table.name}.{column.name} is not a multi_category column", "multi_cat_col")

    pk_name = _text(p, "primary_key_column")
    primary_key = table.primary_key
    if primary_key is None or primary_key.name != pk_name:
        actual = primary_key.name if primary_key else "none"
        _fail("pk-mismatch", f"primary_key_column must be the primary key of {table.name} ({actual})",
              "primary_key_column")

    try:
        dtype = DataType.parse(_text(p, "dtype"))
    except ValueError:
        _fail("invalid-dtype", f"Unknown dtype '{p.get('dtype')}'", "dtype")
    if dtype not in EXPLODE_DTYPES:
        _fail("invalid-dtype", f"Exploded elements cannot have dtype {dtype.value}", "dtype")

    new_table = draft.identifier(_text(p, "new_table_name"), "new_table_name")
    new_col = draft.identifier(_text(p, "new_col_name"), "new_col_name")
    if draft.schema.is_name_taken(new_table):
        _fail("name-collision", f"A table named '{new_table}' already exists", "new_table_name")
    if new_col == pk_name:
        _fail("name-collision", f"new_col_name must differ from '{pk_name}'", "new_col_name")

    back_refs, elements = [], []
    for pk_value, cell in zip(draft.tables[table.name].column(pk_name), draft.tables[table.name].column(column.name)):
        if cell is None:
            continue
        for element in cell:
            if is_missing(element):
                continue
            back_refs.append(pk_value)
            elements.append(hashable_cell(element))

    back_ref = ColumnDef(pk_name, DataType.FOREIGN_KEY, f"{table.name}.{pk_name}")
    source = _sibling_source(table, new_table)

    if dtype == DataType.FOREIGN_KEY:
        draft.add_table(TableDef(new_table, source, table.format, (back_ref,)),
                        TableData(new_table, {pk_name: back_refs}, len(back_refs)))
        draft.link_to_dummy(new_table, new_col, elements, new_col, new_col)
    else:
        id_name = f"{new_table}ID"
        while id_name in (pk_name, new_col):
            id_name = f"_{id_name}"
        columns = (ColumnDef(id_name, DataType.PRIMARY_KEY), back_ref, ColumnDef(new_col, dtype))
        data = TableData(new_table, {id_name: list(range(len(elements))), pk_name: back_refs, new_col: elements},
                         len(elements))
        draft.add_table(TableDef(new_table, source, table.format, columns), data)

    draft.drop_columns(table.name, [column.name])
    draft.log.append(f"Exploded {table.name}.{column.name} into {new_table} ({len(elements)} rows)")


def _non_dummy_action(draft: _Draft, p: Mapping[str, Any]) -> None:
    table = draft.table(_text(p, "base_table_name"), "base_table_name")
    names = _coerce_columns(p.get("cols"))
    if not names:
        _fail("empty-columns", "cols must name at least one column", "cols")

    moved = []
    for name in names:
        column = draft.column(table, name, "cols")
        if column.dtype.is_key:
            _fail("key-column", f"{table.name}.{name} is a {column.dtype.value} column and cannot be moved", "cols")
        if name == table.time_column:
            _fail("time-column", f"{table.name}.{name} is the table's time column and cannot be moved", "cols")
        if column not in moved:
            moved.append(column)

    new_table = draft.identifier(_text(p, "new_table_name"), "new_table_name")
    if draft.schema.is_name_taken(new_table):
        _fail("name-collision", f"A table named '{new_table}' already exists", "new_table_name")
    moved_names = [c.name for c in moved]
    if table.has_column(new_table) and new_table not in moved_names:
        _fail("name-collision", f"{table.name} already has a column named '{new_table}'", "new_table_name")

    data = draft.tables[table.name]
    rows = list(zip(*(data.column(c.name) for c in moved)))
    index: Dict[Tuple, int] = {}
    distinct_rows, codes = [], []
    for row in rows:
        key = tuple(hashable_cell(v) for v in row)
        if key not in index:
            index[key] = len(distinct_rows)
            distinct_rows.append(row)
        codes.append(index[key])

    id_name = f"{new_table}ID"
    while id_name in moved_names:
        id_name = f"_{id_name}"
    new_columns = {id_name: list(range(len(distinct_rows)))}
    for position, column in enumerate(moved):
        new_columns[column.name] = [row[position] for row in distinct_rows]

    definition = TableDef(new_table, _sibling_source(table, new_table), table.format,
                          (ColumnDef(id_name, DataType.PRIMARY_KEY),) + tuple(moved))
    draft.add_table(definition, TableData(new_table, new_columns, len(distinct_rows)))

    position = min(table.column_names.index(name) for name in moved_names)
    draft.drop_columns(table.name, moved_names)
    position = min(position, len(draft.schema.table(table.name).columns))
    draft.set_column(table.name, ColumnDef(new_table, DataType.FOREIGN_KEY, f"{new_table}.{id_name}"), codes, position)
    draft.log.append(f"Moved {moved_names} of {table.name} into {new_table} ({len(distinct_rows)} rows)")


def _remove_pk_action(draft: _Draft, p: Mapping[str, Any]) -> None:
    table = draft.table(_text(p, "base_table_name"), "base_table_name")
    column = draft.column(table, _text(p, "col_name"), "col_name")
    if not column.is_primary_key:
        _fail("not-primary-key", f"{table.name}.{column.name} is not the primary key", "col_name")

    referencing = draft.schema.inbound_links(table.name)
    if referencing:
        names = ", ".join(f"{t}.{c}" for t, c in referencing)
        _fail("referenced-pk", f"{table.name}.{column.name} is referenced by {names}", "col_name")

    draft.drop_columns(table.name, [column.name])
    draft.log.append(f"Removed primary key {table.name}.{column.name}")


def _add_pk_action(draft: _Draft, p: Mapping[str, Any]) -> None:
    table = draft.table(_text(p, "base_table_name"), "base_table_name")
    name = draft.identifier(_text(p, "col_name"), "col_name")
    if table.primary_key is not None:
        _fail("pk-exists", f"{table.name} already has primary key {table.primary_key.name}", "base_table_name")
    if table.has_column(name):
        _fail("name-collision", f"{table.name} already has a column named '{name}'", "col_name")

    rows = draft.tables[table.name].row_count
    draft.set_column(table.name, ColumnDef(name, DataType.PRIMARY_KEY), list(range(rows)), 0)
    draft.log.append(f"Added primary key {table.name}.{name} over {rows} rows")


_HANDLERS = {
    ActionKind.GENERATE_OR_CONNECT_DUMMY_TABLE: _dummy_action,
    ActionKind.CONNECT_TWO_COLUMNS: _connect_action,
    ActionKind.EXPLODE_MULTI_CATEGORY_COLUMN: _explode_action,
    ActionKind.GENERATE_NON_DUMMY_TABLE: _non_dummy_action,
    ActionKind.REMOVE_PRIMARY_KEY: _remove_pk_action,
    ActionKind.ADD_PRIMARY_KEY: _add_pk_action,
}


def validate_action_payload(payload: Any) -> Tuple[Optional[Action], Optional[ActionError]]:
    """Check a `<selection>` entry and turn it into an Action"""
    errors = sorted(Draft7Validator(ACTION_ENTRY_SCHEMA).iter_errors(payload), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        field_name = str(first.path[-1]) if first.path else None
        if first.validator == "required":
            return None, ActionError("missing-parameter", first.message, "action")
        return None, ActionError("malformed-action", first.message, field_name)

    try:
        action = Action.from_payload(payload)
    except ValueError:
        return None, ActionError("unknown-action", f"Unknown action '{payload.get('action')}'", "action")

    missing = action.missing_parameters()
    if missing:
        return None, ActionError("missing-parameter", f"Missing parameter '{missing[0]}' for {action.kind.value}",
                                 missing[0])
    return action, None


def _apply_one(state: Database, action: Union[Action, Mapping[str, Any]]) -> ApplyResult:
    if not isinstance(action, Action):
        action, error = validate_action_payload(action)
        if error is not None:
            return ApplyResult(state, error=error)

    if action.is_terminal:
        return ApplyResult(state, log=("No further augmentation",), terminal=True)

    missing = action.missing_parameters()
    if missing:
        return ApplyResult(state, error=ActionError(
            "missing-parameter", f"Missing parameter '{missing[0]}' for {action.kind.value}", missing[0]))

    handler = _HANDLERS.get(action.kind)
    if handler is None:
        return ApplyResult(state, error=ActionError("unknown-action", f"Unknown action '{action.kind}'", "action"))

    draft = _Draft(state)
    try:
        handler(draft, action.parameters)
    except _ActionFailure as failure:
        logger.info("Action %s rejected: %s", action.kind.value, failure.error)
        return ApplyResult(state, error=failure.error)

    violations = validate_schema(draft.schema)
    if violations:
        message = "; ".join(str(v) for v in violations)
        return ApplyResult(state, error=ActionError("invalid-result", f"The action would break the schema: {message}"))

    return ApplyResult(draft.finish(), log=tuple(draft.log), warnings=tuple(draft.warnings), steps=1)


def apply_action(state: Database, action: Union[Action, Mapping[str, Any]]) -> ApplyResult:
    """Apply one action to an immutable state; failures come back as ActionError values"""
    return _apply_one(state, action)


def apply_script(state: Database, actions: Sequence[Union[Action, Mapping[str, Any]]]) -> ApplyResult:
    """Left fold of apply_action, stopping at the first error or at a `none` action"""
    log: List[str] = []
    warnings: List[str] = []
    for step, action in enumerate(actions, 1):
        result = _apply_one(state, action)
        if result.error is not None:
            return ApplyResult(state, tuple(log), replace(result.error, step=step), tuple(warnings), steps=step - 1)
        log.extend(f"step {step}: {line}" for line in result.log)
        warnings.extend(result.warnings)
        if result.terminal:
            return ApplyResult(state, tuple(log), None, tuple(warnings), terminal=True, steps=step - 1)
        state = result.state
    return ApplyResult(state, tuple(log), None, tuple(warnings), steps=len(actions))


def parse_action_script(document: Any) -> List[Action]:
    """Actions from a script document: a bare array, or an object with an "actions" array"""
    errors = list(Draft7Validator(ACTION_SCRIPT_SCHEMA).iter_errors(document))
    if errors:
        raise DataLoadError(f"Invalid action script: {errors[0].message}")

    entries = document["actions"] if isinstance(document, dict) else document
    actions = []
    for number, entry in enumerate(entries, 1):
        action, error = validate_action_payload(entry)
        if error is not None:
            raise DataLoadError(f"Action {number}: {error.message}")
        actions.append(action)
    return actions


def load_action_script(path: str) -> List[Action]:
    from storage import load_json

    return parse_action_script(load_json(path))


def write_database(database: Database, out_dir: str, storage=None) -> DatasetSchema:
    """Write schema.yaml and one payload per table under data/, returning the rewritten schema"""
    from ingest_profile import write_table
    from schema_core import serialize_schema

    tables = []
    for table in database.schema.tables:
        relocated = replace(table, source=os.path.join("data", f"{table.name}.{table.format.extension}"))
        if storage is not None:
            storage.reserve(relocated.source)
        write_table(database.decoded_table(table.name), relocated, out_dir)
        tables.append(relocated)

    schema = replace(database.schema, tables=tuple(tables))
    text = serialize_schema(schema)
    if storage is not None:
        storage.save_text("schema.yaml", text)
    else:
        with open(os.path.join(out_dir, "schema.yaml"), "w", encoding="utf-8") as f:
            f.write(text)
    return schema
