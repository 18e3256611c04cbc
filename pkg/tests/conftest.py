import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import pytest

from docs_corpus import load_fixture
from models import ColumnDef, DataType, DatasetSchema, TableDef, TableFormat


@pytest.fixture
def cot_fixture(tmp_path):
    return load_fixture("cot_paper_journal", target_dir=str(tmp_path))


@pytest.fixture
def cot_database(cot_fixture):
    return cot_fixture.database()


@pytest.fixture
def mag_fixture(tmp_path):
    return load_fixture("mag_mini", target_dir=str(tmp_path))


@pytest.fixture
def small_schema():
    """Paper/Author/Writes with a dummy Venue"""
    paper = TableDef("Paper", "data/Paper.csv", TableFormat.CSV, (
        ColumnDef("PaperID", DataType.PRIMARY_KEY),
        ColumnDef("Title", DataType.TEXT),
        ColumnDef("Venue", DataType.FOREIGN_KEY, "Venue.VenueName"),
    ))
    author = TableDef("Author", "data/Author.csv", TableFormat.CSV, (
        ColumnDef("AuthorID", DataType.PRIMARY_KEY),
        ColumnDef("Name", DataType.TEXT),
    ))
    writes = TableDef("Writes", "data/Writes.csv", TableFormat.CSV, (
        ColumnDef("AuthorID", DataType.FOREIGN_KEY, "Author.AuthorID"),
        ColumnDef("PaperID", DataType.FOREIGN_KEY, "Paper.PaperID"),
    ))
    from schema_core import resolve_links

    return resolve_links(DatasetSchema("toy", (paper, author, writes)))
