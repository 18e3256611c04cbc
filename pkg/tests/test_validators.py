from models import ColumnDef, DataType, DatasetSchema, DummyTableRef, TableDef, TableFormat
from validators import SchemaValidator, validate_schema


def _table(name, *columns, time_column=None):
    return TableDef(name, f"{name}.csv", TableFormat.CSV, columns, time_column)


def test_validate_identifier_empty():
    is_valid, error = SchemaValidator.validate_identifier("", "table name")
    assert not is_valid
    assert "cannot be empty" in error


def test_validate_identifier_invalid_chars():
    is_valid, error = SchemaValidator.validate_identifier("Paper Title", "column name")
    assert not is_valid
    assert "letters, digits and underscores" in error


def test_validate_identifier_valid():
    assert SchemaValidator.validate_identifier("paper_2") == (True, "")


def test_validate_dtype():
    assert SchemaValidator.validate_dtype("categorical")[0]
    is_valid, error = SchemaValidator.validate_dtype("int")
    assert not is_valid
    assert "Unknown dtype" in error


def test_validate_link_reference_shape():
    assert SchemaValidator.validate_link_reference("Paper.PaperID")[0]
    assert not SchemaValidator.validate_link_reference("PaperID")[0]
    assert not SchemaValidator.validate_link_reference("a.b.c")[0]


def test_well_formed_schema_has_no_violations(small_schema):
    assert validate_schema(small_schema) == []


def test_two_primary_keys():
    table = _table("T", ColumnDef("a", DataType.PRIMARY_KEY), ColumnDef("b", DataType.PRIMARY_KEY))
    rules = [v.rule for v in validate_schema(DatasetSchema("d", (table,)))]
    assert rules == ["single-pk"]


def test_link_to_non_primary_key():
    target = _table("U", ColumnDef("id", DataType.PRIMARY_KEY), ColumnDef("name", DataType.TEXT))
    source = _table("T", ColumnDef("u", DataType.FOREIGN_KEY, "U.name"))
    rules = [v.rule for v in validate_schema(DatasetSchema("d", (target, source)))]
    assert rules == ["link-to-non-pk"]


def test_dangling_link_without_dummy():
    source = _table("T", ColumnDef("u", DataType.FOREIGN_KEY, "Nowhere.key"))
    violations = validate_schema(DatasetSchema("d", (source,)))
    assert [v.rule for v in violations] == ["dangling-link"]
    assert "T.u" in str(violations[0])


def test_dummy_key_mismatch():
    source = _table("T", ColumnDef("u", DataType.FOREIGN_KEY, "Brand.name"))
    schema = DatasetSchema("d", (source,), (DummyTableRef("Brand", "brand"),))
    assert [v.rule for v in validate_schema(schema)] == ["dummy-key-mismatch"]


def test_time_column_must_be_datetime():
    table = _table("T", ColumnDef("when", DataType.TEXT), time_column="when")
    assert [v.rule for v in validate_schema(DatasetSchema("d", (table,)))] == ["time-column-dtype"]
    missing = _table("T", ColumnDef("x", DataType.TEXT), time_column="when")
    assert [v.rule for v in validate_schema(DatasetSchema("d", (missing,)))] == ["time-column-missing"]


def test_duplicate_columns_and_tables():
    table = _table("T", ColumnDef("a", DataType.TEXT), ColumnDef("a", DataType.TEXT))
    rules = {v.rule for v in validate_schema(DatasetSchema("d", (table, table)))}
    assert rules == {"duplicate-column", "duplicate-table"}


def test_link_on_non_foreign_key():
    table = _table("T", ColumnDef("a", DataType.CATEGORY, "U.a"))
    assert [v.rule for v in validate_schema(DatasetSchema("d", (table,)))] == ["link-on-non-fk"]
