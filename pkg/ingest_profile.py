import json
import logging
import os
import re
from datetime import date, datetime
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from dateutil import parser as date_parser

from models import (
    ColumnProfile, DataLoadError, DataType, DatasetSchema, InferredType, TableData, TableDef, TableFormat,
    hashable_cell, is_missing,
)

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_SIZE = 5
MULTIDIMENSIONAL_SENTENCE = "Column is multi-dimensional. Probably an embedding type. Usually not of interest"
FULL_DATE_PATTERN = re.compile(r"^\s*(\d{4}-\d{1,2}-\d{1,2}|\d{1,2}/\d{1,2}/\d{2,4})")


def resolve_source(table_def: TableDef, data_root: Optional[str] = None) -> str:
    if data_root is None or os.path.isabs(table_def.source):
        return table_def.source
    return os.path.join(data_root, table_def.source)


def _tidy_cell(value: Any) -> Any:
    """Normalize one scalar cell: NaN/NaT become None, numpy scalars become Python values"""
    if isinstance(value, (list, tuple, np.ndarray)):
        return value
    if value is pd.NaT or is_missing(value):
        return None
    if isinstance(value, np.generic):
        return value.item()
    return value


def _tidy_numbers(values: List[Any]) -> List[Any]:
    """Turn integral floats back into ints (CSV readers widen int columns holding blanks)"""
    present = [v for v in values if v is not None]
    if present and all(isinstance(v, float) and v.is_integer() for v in present):
        return [None if v is None else int(v) for v in values]
    return values


def _as_list_cell(value: Any) -> Any:
    if value is None:
        return None
    if isinstance(value, np.ndarray):
        return [_tidy_cell(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_tidy_cell(v) for v in value]
    if isinstance(value, str):
        text = value.strip()
        if not text:
            return []
        try:
            parsed = json.loads(text)
        except json.JSONDecodeError:
            return [text]
        return parsed if isinstance(parsed, list) else [parsed]
    return [value]


def _as_vector_cell(value: Any) -> Any:
    if value is None:
        return None
    if isinstance(value, str):
        value = json.loads(value)
    return np.asarray(value, dtype=float)


def _as_timestamp(value: Any) -> Any:
    if value is None:
        return None
    stamp = pd.to_datetime(value, errors="coerce")
    return None if stamp is pd.NaT or pd.isna(stamp) else stamp


def _read_columns(path: str, table_format: TableFormat) -> Dict[str, list]:
    if table_format == TableFormat.CSV:
        frame = pd.read_csv(path)
        return {str(c): _tidy_numbers([_tidy_cell(v) for v in frame[c].tolist()]) for c in frame.columns}

    if table_format == TableFormat.PARQUET:
        frame = pd.read_parquet(path, engine="pyarrow")
        return {str(c): [_tidy_cell(v) for v in frame[c].tolist()] for c in frame.columns}

    columns = {}
    with np.load(path, allow_pickle=True) as arrays:
        for name in arrays.files:
            array = arrays[name]
            if array.ndim > 1:
                columns[name] = [np.asarray(row) for row in array]
            else:
                columns[name] = [_tidy_cell(v) for v in array.tolist()]
    return columns


def load_table(table_def: TableDef, data_root: Optional[str] = None) -> TableData:
    """Load the declared columns of one table from its source file"""
    path = resolve_source(table_def, data_root)
    if not os.path.exists(path):
        raise DataLoadError(f"Source file for table '{table_def.name}' not found: {path}")

    try:
        raw = _read_columns(path, table_def.format)
    except DataLoadError:
        raise
    except Exception as e:
        raise DataLoadError(f"Could not read {table_def.format.value} file {path}: {e}") from e

    undeclared = [name for name in raw if not table_def.has_column(name)]
    if undeclared:
        logger.warning("Table %s: ignoring undeclared columns %s in %s", table_def.name, undeclared, path)

    lengths = {name: len(values) for name, values in raw.items()}
    if len(set(lengths.values())) > 1:
        raise DataLoadError(f"Table '{table_def.name}' has ragged columns in {path}: {lengths}")

    columns: Dict[str, list] = {}
    for column in table_def.columns:
        if column.name not in raw:
            raise DataLoadError(f"Table '{table_def.name}' is missing declared column '{column.name}' in {path}")
        values = raw[column.name]
        if column.dtype == DataType.MULTI_CATEGORY:
            values = [_as_list_cell(v) for v in values]
        elif column.dtype == DataType.EMBEDDING:
            values = [_as_vector_cell(v) for v in values]
        elif column.dtype == DataType.TIMESTAMP:
            values = [_as_timestamp(v) for v in values]
        columns[column.name] = list(values)

    row_count = next(iter(lengths.values()), 0)
    return TableData(table_def.name, columns, row_count)


def load_database(schema: DatasetSchema, data_root: Optional[str] = None):
    """Load every declared table and build the in-memory database state"""
    from action_engine import Database

    tables = {t.name: load_table(t, data_root) for t in schema.tables}
    return Database.from_tables(schema, tables)


def _csv_cell(value: Any) -> Any:
    if value is None:
        return None
    if isinstance(value, np.ndarray):
        return json.dumps(value.tolist())
    if isinstance(value, (list, tuple)):
        return json.dumps([_tidy_cell(v) for v in value], ensure_ascii=False)
    if isinstance(value, (pd.Timestamp, datetime, date)):
        return value.isoformat()
    return value


def write_table(table_data: TableData, table_def: TableDef, data_root: Optional[str] = None) -> str:
    """Write a table payload in its declared format; returns the written path"""
    path = resolve_source(table_def, data_root)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    if table_def.format == TableFormat.NPZ:
        arrays = {}
        for name, values in table_data.columns.items():
            if values and isinstance(values[0], np.ndarray):
                arrays[name] = np.stack(values)
            else:
                arrays[name] = np.asarray(values, dtype=object)
        np.savez(path, **arrays)
        # np.savez appends .npz when missing
        return path if path.endswith(".npz") else f"{path}.npz"

    if table_def.format == TableFormat.PARQUET:
        frame = pd.DataFrame({
            name: pd.Series([v.tolist() if isinstance(v, np.ndarray) else v for v in values], dtype=object)
            for name, values in table_data.columns.items()
        })
        frame.to_parquet(path, engine="pyarrow", index=False)
        return path

    frame = pd.DataFrame({
        name: pd.Series([_csv_cell(v) for v in values], dtype=object)
        for name, values in table_data.columns.items()
    })
    frame.to_csv(path, index=False)
    return path


def _is_vector(value: Any) -> bool:
    if isinstance(value, np.ndarray):
        return value.ndim == 1 and value.size >= 2 and np.issubdtype(value.dtype, np.number)
    if isinstance(value, (list, tuple)) and len(value) >= 2:
        return all(isinstance(v, (float, np.floating)) for v in value)
    return False


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, (bool, np.bool_))


def _is_timestamp(value: Any) -> bool:
    return isinstance(value, (pd.Timestamp, datetime, date, np.datetime64))


def _first_mode(values: Sequence[Any]) -> Any:
    """Most frequent value; ties go to the value seen first"""
    if not len(values):
        return None
    codes, _ = pd.factorize(pd.Series(list(values), dtype=object))
    counts = np.bincount(codes[codes >= 0])
    winner = int(np.argmax(counts))
    return values[int(np.argmax(codes == winner))]


def _plain(value: Any) -> Any:
    return value.item() if isinstance(value, np.generic) else value


def profile_column(values: Sequence[Any], k: int = DEFAULT_SAMPLE_SIZE, seed: int = 0) -> ColumnProfile:
    """Counts, uniques, mode, extrema and k seeded samples of one column"""
    if k < 1:
        raise ValueError("k must be at least 1")

    values = list(values)
    total = len(values)
    if total == 0:
        return ColumnProfile(total=0, uniques=0, nan_count=0)

    present = [v for v in values if not is_missing(v)]
    nan_count = total - len(present)

    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(k, total), replace=False)
    samples = tuple(_plain(values[int(i)]) for i in picks)

    if present and all(_is_vector(v) for v in present):
        widths = {len(v) for v in present}
        if len(widths) == 1:
            uniques = len({hashable_cell(v) for v in present})
            return ColumnProfile(total=total, uniques=uniques, nan_count=nan_count, samples=samples,
                                 is_multidimensional=True)

    if present and all(isinstance(v, (list, tuple, np.ndarray)) for v in present):
        flattened = [_plain(e) for cell in present for e in cell if not is_missing(e)]
        uniques = len({hashable_cell(v) for v in present})
        return ColumnProfile(
            total=total, uniques=uniques, nan_count=nan_count, mode=_first_mode(flattened),
            samples=samples, expanded_uniques=len(set(flattened)), is_list=True,
        )

    codes, _ = pd.factorize(pd.Series(present, dtype=object)) if present else (np.array([], dtype=int), None)
    uniques = int(codes.max()) + 1 if len(codes) else 0
    mode = _plain(_first_mode(present)) if present else None

    low = high = None
    if present and all(_is_number(v) for v in present):
        array = np.asarray(present)
        low, high = _plain(array.min()), _plain(array.max())
    elif present and all(_is_timestamp(v) for v in present):
        low, high = min(present), max(present)

    return ColumnProfile(total=total, uniques=uniques, nan_count=nan_count, mode=mode, min=low, max=high,
                         samples=samples)


def profile_table(table_data: TableData, k: int = DEFAULT_SAMPLE_SIZE, seed: int = 0) -> Dict[str, ColumnProfile]:
    return {name: profile_column(values, k, seed) for name, values in table_data.columns.items()}


def profile_database(database, k: int = DEFAULT_SAMPLE_SIZE, seed: int = 0) -> Dict[str, Dict[str, ColumnProfile]]:
    """Profile every declared table, decoding dummy-table FK codes back to their raw values"""
    profiles = {}
    for table in database.schema.tables:
        profiles[table.name] = {
            column.name: profile_column(database.decode(table.name, column.name), k, seed)
            for column in table.columns
        }
    return profiles


def _looks_like_full_datetime(value: Any) -> bool:
    if _is_timestamp(value):
        return True
    if not isinstance(value, str) or not FULL_DATE_PATTERN.match(value):
        return False
    try:
        date_parser.parse(value)
    except (ValueError, OverflowError):
        return False
    return True


def _value_kind(values: List[Any]) -> str:
    if not values:
        return "empty"
    if all(isinstance(v, (bool, np.bool_)) for v in values):
        return "bool"
    if all(_is_number(v) for v in values):
        if all(float(v).is_integer() for v in values):
            return "int"
        return "float"
    if all(_looks_like_full_datetime(v) for v in values):
        return "datetime"
    if all(isinstance(v, str) for v in values):
        return "string"
    return "mixed"


def _is_natural_language(values: List[Any]) -> bool:
    words = [len(str(v).split()) for v in values]
    return bool(words) and sum(words) / len(words) >= 3


def infer_types(profiles: Mapping[str, ColumnProfile],
                name_hints: Optional[Mapping[str, str]] = None) -> Dict[str, InferredType]:
    """Deterministic column typing from profiles; never assigns foreign_key"""
    name_hints = name_hints or {}
    inferred = {}

    for column, profile in profiles.items():
        hint = name_hints.get(column, column).lower()
        non_null = profile.total - profile.nan_count

        if non_null <= 0:
            inferred[column] = InferredType(DataType.CATEGORY, 0.2, "The column is empty, so it is treated as a category.")
            continue

        if profile.is_multidimensional:
            inferred[column] = InferredType(
                DataType.EMBEDDING, 0.95, "This column holds fixed-width numeric vectors, probably an embedding.")
            continue

        if profile.is_list:
            inferred[column] = InferredType(
                DataType.MULTI_CATEGORY, 0.9,
                f"This column holds lists of values with {profile.expanded_uniques} distinct elements.")
            continue

        observed = [v for v in list(profile.samples) + [profile.mode] if not is_missing(v)]
        kind = _value_kind(observed)

        if (profile.uniques == profile.total and kind == "int" and profile.has_extrema
                and profile.max - profile.min + 1 <= 2 * profile.total):
            confidence = 0.95 if hint.endswith("id") else 0.85
            inferred[column] = InferredType(
                DataType.PRIMARY_KEY, confidence,
                f"This column is probably an identifier from {profile.min} to {profile.max}, "
                f"as every one of its {profile.total} values is unique.")
        elif kind == "datetime":
            inferred[column] = InferredType(DataType.TIMESTAMP, 0.85, "This column holds full date-time values.")
        elif kind == "string":
            if profile.uniques / non_null >= 0.5 and _is_natural_language(observed):
                inferred[column] = InferredType(
                    DataType.TEXT, 0.8, f"This column holds free text with {profile.uniques} distinct values.")
            else:
                inferred[column] = InferredType(
                    DataType.CATEGORY, 0.75, f"This column holds {profile.uniques} distinct labels.")
        elif kind == "float":
            inferred[column] = InferredType(DataType.NUMERIC, 0.8, "This column holds real-valued measurements.")
        elif kind == "int":
            few_values = profile.uniques <= max(20, 0.05 * non_null)
            if few_values or "year" in hint:
                inferred[column] = InferredType(
                    DataType.CATEGORY, 0.7,
                    f"This column holds {profile.uniques} distinct integer codes, better treated as a category.")
            else:
                inferred[column] = InferredType(DataType.NUMERIC, 0.6, "This column holds integer quantities.")
        else:
            inferred[column] = InferredType(
                DataType.CATEGORY, 0.5, f"This column holds {profile.uniques} distinct values of mixed kinds.")

    return inferred


def _format_value(value: Any) -> str:
    value = _plain(value)
    if isinstance(value, pd.Timestamp):
        return str(value)
    return str(value)


def format_samples(samples: Sequence[Any]) -> str:
    """numpy-style for numeric samples, list-style otherwise"""
    if samples and all(_is_number(v) for v in samples):
        return np.array2string(np.asarray(samples), max_line_width=10 ** 6)
    rendered = [str(v) if _is_timestamp(v) else v for v in samples]
    return repr(rendered)


def render_stats_report(schema: DatasetSchema, profiles: Mapping[str, Mapping[str, ColumnProfile]]) -> str:
    """Per-table statistics blocks in the planner's dataset_stats layout"""
    stanzas = []
    for table in schema.tables:
        table_profiles = profiles.get(table.name)
        if not table_profiles:
            continue

        lines = [f"Analysis for Table {table.name}:"]
        for column in table.column_names:
            profile = table_profiles.get(column)
            if profile is None:
                continue
            lines.append(f"  Column: {column}")
            if profile.is_multidimensional:
                lines.append(MULTIDIMENSIONAL_SENTENCE)
                continue
            if profile.has_extrema:
                lines.append(f"    Max: {_format_value(profile.max)}")
                lines.append(f"    Min: {_format_value(profile.min)}")
            lines.append(f"    Mode: {_format_value(profile.mode)}")
            lines.append(f"    Sampled Values: {format_samples(profile.samples)}")
            lines.append(f"    Number of Unique Values: {profile.uniques}")
            if profile.expanded_uniques is not None:
                lines.append(f"    Number of Unique Values After Expansion: {profile.expanded_uniques}")
            lines.append(f"    Number of nan values: {profile.nan_count}")
        stanzas.append("\n".join(lines))

    return "\n\n".join(stanzas) + "\n" if stanzas else ""
