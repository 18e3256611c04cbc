import logging

import numpy as np
import pandas as pd
import pytest

from ingest_profile import (
    MULTIDIMENSIONAL_SENTENCE, infer_types, load_table, profile_column, profile_database, render_stats_report,
    write_table,
)
from models import ColumnDef, ColumnProfile, DataLoadError, DataType, DatasetSchema, TableData, TableDef, TableFormat


def _csv_table(name="T", *columns):
    return TableDef(name, f"{name}.csv", TableFormat.CSV, tuple(ColumnDef(c, d) for c, d in columns))


def test_load_cot_paper_parses_author_lists(cot_fixture):
    paper = cot_fixture.schema().table("Paper")
    data = load_table(paper, cot_fixture.root)

    assert data.row_count == 100
    assert data.column_names == paper.column_names
    authors = data.column("Authors")
    assert all(isinstance(cell, list) and len(cell) == 2 for cell in authors)
    assert authors[0] == ["Yann LeCun", "Geoffrey Hinton"]
    assert data.column("PaperID")[:3] == [0, 1, 2]


def test_blank_integer_cells_stay_integers(tmp_path):
    (tmp_path / "T.csv").write_text("a,b\n1,x\n,y\n3,z\n")
    data = load_table(_csv_table("T", ("a", DataType.NUMERIC), ("b", DataType.CATEGORY)), str(tmp_path))
    assert data.column("a") == [1, None, 3]
    assert data.column("b") == ["x", "y", "z"]


def test_missing_source_file(tmp_path):
    with pytest.raises(DataLoadError) as excinfo:
        load_table(_csv_table("T", ("a", DataType.NUMERIC)), str(tmp_path))
    assert "not found" in str(excinfo.value)


def test_missing_declared_column(tmp_path):
    (tmp_path / "T.csv").write_text("a\n1\n2\n")
    with pytest.raises(DataLoadError) as excinfo:
        load_table(_csv_table("T", ("a", DataType.NUMERIC), ("b", DataType.CATEGORY)), str(tmp_path))
    assert "'b'" in str(excinfo.value)


def test_undeclared_columns_are_dropped_with_warning(tmp_path, caplog):
    (tmp_path / "T.csv").write_text("a,extra\n1,x\n2,y\n")
    with caplog.at_level(logging.WARNING, logger="ingest_profile"):
        data = load_table(_csv_table("T", ("a", DataType.NUMERIC)), str(tmp_path))
    assert data.column_names == ["a"]
    assert "extra" in caplog.text


def test_timestamp_columns_are_parsed(tmp_path):
    (tmp_path / "T.csv").write_text("when\n2021-03-04\nnot a date\n")
    data = load_table(_csv_table("T", ("when", DataType.TIMESTAMP)), str(tmp_path))
    assert data.column("when")[0] == pd.Timestamp("2021-03-04")
    assert data.column("when")[1] is None


def test_write_table_parquet_keeps_lists(tmp_path):
    table = TableDef("Author", "data/Author.pqt", TableFormat.PARQUET, (
        ColumnDef("AuthorID", DataType.PRIMARY_KEY),
        ColumnDef("Topics", DataType.MULTI_CATEGORY),
    ))
    data = TableData("Author", {"AuthorID": [0, 1], "Topics": [["ml", "db"], ["ir"]]}, 2)

    path = write_table(data, table, str(tmp_path))

    assert path.endswith("Author.pqt")
    loaded = load_table(table, str(tmp_path))
    assert loaded.column("AuthorID") == [0, 1]
    assert loaded.column("Topics") == [["ml", "db"], ["ir"]]


def test_write_table_csv_serializes_lists_as_json(tmp_path):
    table = _csv_table("T", ("id", DataType.PRIMARY_KEY), ("tags", DataType.MULTI_CATEGORY))
    write_table(TableData("T", {"id": [0, 1], "tags": [["a", "b"], None]}, 2), table, str(tmp_path))
    assert load_table(table, str(tmp_path)).column("tags") == [["a", "b"], None]


def test_profile_scalar_column():
    profile = profile_column([1, 2, 2, None], k=2, seed=0)
    assert profile.total == 4
    assert profile.uniques == 2
    assert profile.nan_count == 1
    assert profile.mode == 2
    assert (profile.min, profile.max) == (1, 2)
    assert len(profile.samples) == 2


def test_profile_samples_are_seeded():
    values = list(range(50))
    assert profile_column(values, k=5, seed=7).samples == profile_column(values, k=5, seed=7).samples


def test_profile_sample_size_is_capped():
    assert len(profile_column(["a", "b"], k=10).samples) == 2


def test_profile_list_column():
    profile = profile_column([["a", "b"], ["b"], None])
    assert profile.is_list
    assert profile.expanded_uniques == 2
    assert profile.mode == "b"
    assert profile.nan_count == 1


def test_profile_vector_column():
    profile = profile_column([np.array([0.1, 0.2]), np.array([0.3, 0.4])])
    assert profile.is_multidimensional
    assert profile.uniques == 2


def test_profile_empty_and_bad_k():
    assert profile_column([]).total == 0
    with pytest.raises(ValueError):
        profile_column([1], k=0)


def test_profile_database_on_cot(cot_database):
    profiles = profile_database(cot_database)
    assert set(profiles) == {"Paper", "Journal"}
    assert profiles["Paper"]["Journal"].uniques == 10
    assert profiles["Paper"]["Year"].min == 2015
    assert profiles["Paper"]["Year"].max == 2022
    assert profiles["Paper"]["Authors"].is_list


def test_infer_types_on_cot(cot_database):
    inferred = infer_types(profile_database(cot_database)["Paper"])

    assert inferred["PaperID"].dtype == DataType.PRIMARY_KEY
    assert inferred["Authors"].dtype == DataType.MULTI_CATEGORY
    assert inferred["Journal"].dtype == DataType.CATEGORY
    assert inferred["Year"].dtype == DataType.CATEGORY
    assert inferred["Abstract"].dtype == DataType.TEXT
    assert all(t.dtype != DataType.FOREIGN_KEY for t in inferred.values())
    assert all(0.0 <= t.confidence <= 1.0 for t in inferred.values())


def test_infer_types_timestamps_floats_and_vectors():
    profiles = {
        "when": profile_column(["2020-01-02", "2021-03-04 10:00", "2022-05-06"]),
        "score": profile_column([0.5, 1.25, 3.75]),
        "vec": profile_column([np.array([0.1, 0.2]), np.array([0.3, 0.4])]),
        "blank": ColumnProfile(total=3, uniques=0, nan_count=3),
    }
    inferred = infer_types(profiles)
    assert inferred["when"].dtype == DataType.TIMESTAMP
    assert inferred["score"].dtype == DataType.NUMERIC
    assert inferred["vec"].dtype == DataType.EMBEDDING
    assert inferred["blank"].dtype == DataType.CATEGORY


def test_stats_report_layout(cot_database):
    report = render_stats_report(cot_database.schema, profile_database(cot_database))
    lines = report.splitlines()

    assert lines[0] == "Analysis for Table Paper:"
    assert "Analysis for Table Journal:" in lines
    assert "  Column: Authors" in lines
    assert any(line.startswith("    Number of Unique Values After Expansion: ") for line in lines)
    assert "    Max: 2022" in lines
    assert "    Number of nan values: 0" in lines


def test_stats_report_embedding_sentence():
    table = TableDef("Doc", "Doc.npz", TableFormat.NPZ, (ColumnDef("vec", DataType.EMBEDDING),))
    profile = profile_column([np.array([0.1, 0.2]), np.array([0.3, 0.4])])
    report = render_stats_report(DatasetSchema("docs", (table,)), {"Doc": {"vec": profile}})
    assert report.splitlines() == ["Analysis for Table Doc:", "  Column: vec", MULTIDIMENSIONAL_SENTENCE]
