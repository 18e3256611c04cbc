import logging
from typing import Any, Dict, List

import yaml

from models import (
    ColumnDef, DataType, DatasetSchema, DummyTableRef, SchemaLinkError, SchemaParseError, TableDef, TableFormat,
)
from validators import SchemaValidator

logger = logging.getLogger(__name__)

TABLE_KEYS = ("name", "source", "format", "columns", "time_column")
COLUMN_KEYS = ("name", "dtype", "link_to", "description")


class _IndentedDumper(yaml.SafeDumper):
    """SafeDumper that indents list items under their parent key"""

    def increase_indent(self, flow=False, indentless=False):
        return super().increase_indent(flow, False)


def _require_identifier(value: Any, kind: str) -> str:
    is_valid, error = SchemaValidator.validate_identifier(value, kind)
    if not is_valid:
        raise SchemaParseError(error)
    return str(value)


def _parse_column(raw: Any, table_name: str) -> ColumnDef:
    if not isinstance(raw, dict):
        raise SchemaParseError(f"Column entries of table '{table_name}' must be mappings")

    name = _require_identifier(raw.get("name"), "column name")
    spelling = raw.get("dtype")
    if spelling is None:
        raise SchemaParseError(f"Column '{table_name}.{name}' has no dtype")
    try:
        dtype = DataType.parse(spelling)
    except ValueError:
        raise SchemaParseError(f"Unknown dtype '{spelling}' for column '{table_name}.{name}'")

    link_to = raw.get("link_to")
    if link_to is not None:
        link_to = str(link_to)
        if dtype != DataType.FOREIGN_KEY:
            raise SchemaParseError(f"Column '{table_name}.{name}' has link_to but dtype {dtype.value}")
        is_valid, error = SchemaValidator.validate_link_reference(link_to)
        if not is_valid:
            raise SchemaParseError(error)

    description = raw.get("description")
    unknown = set(raw) - set(COLUMN_KEYS)
    if unknown:
        logger.warning("Ignoring unknown keys %s on column %s.%s", sorted(unknown), table_name, name)

    return ColumnDef(name, dtype, link_to, None if description is None else str(description))


def _parse_table(raw: Any) -> TableDef:
    if not isinstance(raw, dict):
        raise SchemaParseError("Table entries must be mappings")

    name = _require_identifier(raw.get("name"), "table name")
    source = raw.get("source")
    if not source:
        raise SchemaParseError(f"Table '{name}' has no source")
    source = str(source)

    try:
        table_format = TableFormat.parse(raw["format"]) if raw.get("format") else TableFormat.from_source(source)
    except ValueError as e:
        raise SchemaParseError(f"Table '{name}': {e}")

    raw_columns = raw.get("columns") or []
    if not isinstance(raw_columns, list):
        raise SchemaParseError(f"Columns of table '{name}' must be a list")
    columns = [_parse_column(c, name) for c in raw_columns]

    seen = set()
    for column in columns:
        if column.name in seen:
            raise SchemaParseError(f"Duplicate column '{column.name}' in table '{name}'")
        seen.add(column.name)

    time_column = raw.get("time_column")
    return TableDef(name, source, table_format, tuple(columns), None if time_column is None else str(time_column))


def parse_schema(yaml_text: str) -> DatasetSchema:
    """Parse schema YAML, normalize dtype aliases and collect dummy tables"""
    try:
        document = yaml.safe_load(yaml_text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        line = mark.line + 1 if mark is not None else None
        column = mark.column + 1 if mark is not None else None
        raise SchemaParseError(f"YAML syntax error: {e.problem or e}", line, column) from e
    except yaml.YAMLError as e:
        raise SchemaParseError(f"YAML syntax error: {e}") from e

    if not isinstance(document, dict):
        raise SchemaParseError("Schema must be a mapping with dataset_name and tables")
    if document.get("dataset_name") is None:
        raise SchemaParseError("Schema is missing dataset_name")

    raw_tables = document.get("tables") or []
    if not isinstance(raw_tables, list):
        raise SchemaParseError("tables must be a list")

    tables = [_parse_table(raw) for raw in raw_tables]
    seen = set()
    for table in tables:
        if table.name in seen:
            raise SchemaParseError(f"Duplicate table '{table.name}'")
        seen.add(table.name)

    return resolve_links(DatasetSchema(str(document["dataset_name"]), tuple(tables)))


def load_schema_file(path: str) -> DatasetSchema:
    """Read and parse a schema YAML file"""
    with open(path, "r", encoding="utf-8") as f:
        return parse_schema(f.read())


def resolve_links(schema: DatasetSchema, freeze_dummies: bool = False) -> DatasetSchema:
    """Materialize a dummy table for every link_to that names an undeclared table"""
    dummies: Dict[str, str] = {d.name: d.key_column for d in schema.derived}

    for table in schema.tables:
        for column in table.foreign_keys:
            if not column.link_to or "." not in column.link_to:
                continue
            target_table, target_column = column.link_to.split(".", 1)

            declared = schema.table(target_table)
            if declared is not None:
                pk = declared.primary_key
                if pk is None or pk.name != target_column:
                    raise SchemaLinkError(
                        f"{table.name}.{column.name} links to {column.link_to}, which is not the primary key of "
                        f"'{target_table}'; use connect_two_columns for that")
                continue

            if freeze_dummies and target_table not in dummies:
                continue
            known = dummies.setdefault(target_table, target_column)
            if known != target_column:
                raise SchemaLinkError(
                    f"Dummy table '{target_table}' is linked by both '{known}' and '{target_column}'")

    return schema.with_derived(DummyTableRef(name, key) for name, key in dummies.items())


def schema_to_dict(schema: DatasetSchema) -> Dict[str, Any]:
    """Canonical dictionary form of a schema (dummy tables stay implicit)"""
    tables: List[Dict[str, Any]] = []
    for table in schema.tables:
        columns = []
        for column in table.columns:
            entry: Dict[str, Any] = {"name": column.name, "dtype": column.dtype.value}
            if column.link_to is not None:
                entry["link_to"] = column.link_to
            if column.description is not None:
                entry["description"] = column.description
            columns.append(entry)

        table_entry: Dict[str, Any] = {
            "name": table.name,
            "source": table.source,
            "format": table.format.value,
            "columns": columns,
        }
        if table.time_column is not None:
            table_entry["time_column"] = table.time_column
        tables.append(table_entry)

    return {"dataset_name": schema.dataset_name, "tables": tables}


def serialize_schema(schema: DatasetSchema) -> str:
    """Canonical YAML text; equal schemas always produce equal bytes"""
    return yaml.dump(
        schema_to_dict(schema),
        Dumper=_IndentedDumper,
        sort_keys=False,
        default_flow_style=False,
        allow_unicode=True,
        width=1000,
    )
