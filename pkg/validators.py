import re
from collections import Counter
from typing import List, Optional, Tuple

from models import DataType, DatasetSchema, TableDef, Violation

IDENTIFIER_PATTERN = re.compile(r"^[A-Za-z0-9_]+$")


class SchemaValidator:
    """Validates schema names, dtypes and links"""

    @staticmethod
    def validate_identifier(name: str, kind: str = "name") -> Tuple[bool, str]:
        """Validate a table or column identifier. Returns (is_valid, error_message)"""
        if name is None or not str(name).strip():
            return False, f"{kind.capitalize()} cannot be empty"

        if not IDENTIFIER_PATTERN.match(str(name)):
            return False, f"{kind.capitalize()} '{name}' may only contain letters, digits and underscores"

        return True, ""

    @staticmethod
    def validate_dtype(spelling: str) -> Tuple[bool, str]:
        """Validate a dtype spelling, aliases included. Returns (is_valid, error_message)"""
        try:
            DataType.parse(spelling)
        except ValueError:
            return False, f"Unknown dtype '{spelling}'"
        return True, ""

    @staticmethod
    def validate_link_reference(link_to: str) -> Tuple[bool, str]:
        """Validate the 'Table.Column' shape of a link. Returns (is_valid, error_message)"""
        if not link_to or str(link_to).count(".") != 1:
            return False, f"link_to '{link_to}' must have the form Table.Column"

        table, column = str(link_to).split(".")
        for part in (table, column):
            is_valid, error = SchemaValidator.validate_identifier(part, "link target")
            if not is_valid:
                return False, error

        return True, ""

    @staticmethod
    def validate_table(table: TableDef) -> List[Violation]:
        """Check the per-table invariants"""
        violations = []
        name = table.name

        is_valid, error = SchemaValidator.validate_identifier(name, "table name")
        if not is_valid:
            violations.append(Violation(name, None, "invalid-identifier", error))

        if not table.columns:
            violations.append(Violation(name, None, "empty-table", f"Table '{name}' has no columns"))

        counts = Counter(table.column_names)
        for column_name, count in counts.items():
            if count > 1:
                violations.append(Violation(name, column_name, "duplicate-column",
                                            f"Column '{column_name}' appears {count} times"))

        primary_keys = [c.name for c in table.columns if c.is_primary_key]
        if len(primary_keys) > 1:
            violations.append(Violation(name, primary_keys[1], "single-pk",
                                        f"Table '{name}' has {len(primary_keys)} primary keys: {primary_keys}"))

        for column in table.columns:
            is_valid, error = SchemaValidator.validate_identifier(column.name, "column name")
            if not is_valid:
                violations.append(Violation(name, column.name, "invalid-identifier", error))

            if column.is_foreign_key and not column.link_to:
                violations.append(Violation(name, column.name, "fk-link-required",
                                            "Foreign key column needs a link_to target"))
            elif column.link_to and not column.is_foreign_key:
                violations.append(Violation(name, column.name, "link-on-non-fk",
                                            f"Only foreign_key columns may carry link_to (dtype is {column.dtype.value})"))
            elif column.link_to:
                is_valid, error = SchemaValidator.validate_link_reference(column.link_to)
                if not is_valid:
                    violations.append(Violation(name, column.name, "malformed-link", error))

        if table.time_column is not None:
            time_column = table.column(table.time_column)
            if time_column is None:
                violations.append(Violation(name, table.time_column, "time-column-missing",
                                            f"time_column '{table.time_column}' is not a column of '{name}'"))
            elif time_column.dtype != DataType.TIMESTAMP:
                violations.append(Violation(name, table.time_column, "time-column-dtype",
                                            f"time_column must have dtype datetime, not {time_column.dtype.value}"))

        return violations


def _link_violation(schema: DatasetSchema, table: str, column: str, link_to: str) -> Optional[Violation]:
    target_table, target_column = link_to.split(".")
    declared = schema.table(target_table)
    if declared is not None:
        pk = declared.primary_key
        if pk is None or pk.name != target_column:
            return Violation(table, column, "link-to-non-pk",
                             f"link_to '{link_to}' must name the primary key of '{target_table}'")
        return None

    dummy = schema.dummy(target_table)
    if dummy is None:
        return Violation(table, column, "dangling-link",
                         f"link_to '{link_to}' names neither a table nor a dummy table")
    if dummy.key_column != target_column:
        return Violation(table, column, "dummy-key-mismatch",
                         f"Dummy table '{dummy.name}' is keyed by '{dummy.key_column}', not '{target_column}'")
    return None


def validate_schema(schema: DatasetSchema) -> List[Violation]:
    """Return every broken schema rule; an empty list means the schema is well formed"""
    violations: List[Violation] = []

    counts = Counter(schema.table_names)
    for table_name, count in counts.items():
        if count > 1:
            violations.append(Violation(table_name, None, "duplicate-table",
                                        f"Table '{table_name}' is declared {count} times"))

    dummy_counts = Counter(schema.dummy_names)
    for dummy in schema.derived:
        if dummy.name in counts:
            violations.append(Violation(dummy.name, None, "dummy-name-collision",
                                        f"Dummy table '{dummy.name}' shadows a declared table"))
        if dummy_counts[dummy.name] > 1:
            violations.append(Violation(dummy.name, dummy.key_column, "dummy-key-mismatch",
                                        f"Dummy table '{dummy.name}' has more than one key column"))

    for table in schema.tables:
        violations.extend(SchemaValidator.validate_table(table))
        for column in table.foreign_keys:
            if not column.link_to or SchemaValidator.validate_link_reference(column.link_to)[1]:
                continue
            violation = _link_violation(schema, table.name, column.name, column.link_to)
            if violation is not None:
                violations.append(violation)

    return violations
