import sys
import textwrap

import numpy as np
import pytest

from ingest_profile import profile_column, profile_database
from join_discovery import (
    SubprocessEmbedder, TrigramEmbedder, cosine_similarity, embed_text, ordinal, overlap_score,
    parse_similarity_report, rank_pairs, representative_values, serialize_column_for_embedding,
)
from models import ColumnKey, DataType, EmbedderError, SimilarityMethod


def test_ordinals():
    assert [ordinal(n) for n in (1, 2, 3, 4, 11, 12, 13, 21, 22, 101, 111)] == [
        "1st", "2nd", "3rd", "4th", "11th", "12th", "13th", "21st", "22nd", "101st", "111th"]


def test_trigram_embedder_is_unit_norm_and_deterministic():
    embedder = TrigramEmbedder(dimension=64)
    u = embedder.embed("Paper.Journal category values: Nature, Science")
    assert u.shape == (64,)
    assert np.linalg.norm(u) == pytest.approx(1.0)
    assert np.array_equal(u, TrigramEmbedder(dimension=64).embed("Paper.Journal category values: Nature, Science"))


def test_embed_text_defaults_to_trigrams():
    u = embed_text("Journal.Name text values: Nature")
    assert np.linalg.norm(u) == pytest.approx(1.0)
    assert np.array_equal(embed_text("Journal.Name text values: Nature", TrigramEmbedder()), u)


def test_trigram_embedder_rejects_bad_dimension():
    with pytest.raises(EmbedderError):
        TrigramEmbedder(dimension=0)


def test_cosine_similarity_is_clamped():
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == 0.0
    assert cosine_similarity(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(1.0)
    assert cosine_similarity(np.zeros(2), np.array([1.0, 0.0])) == 0.0


def test_overlap_score_is_containment():
    assert overlap_score(["a", "b"], ["a", "b", "c", "d"]) == 1.0
    assert overlap_score(["a", "x"], ["a", "b", "c"]) == 0.5
    assert overlap_score([["a", "b"], None], ["b"]) == 1.0
    assert overlap_score([], ["a"]) == 0.0


def test_representative_values_orders_by_frequency_then_text():
    assert representative_values(["b", "a", "b", "c", "a", "b"], k=2) == ["b", "a"]
    assert representative_values([["x", "y"], ["y"]], k=5) == ["y", "x"]


def test_serialization_names_table_column_and_type():
    text = serialize_column_for_embedding(ColumnKey("Paper", "Journal"), None, ["Nature", "Science"],
                                          DataType.CATEGORY)
    assert text == "Paper.Journal category values: Nature, Science"


def test_overlap_ranking_finds_journal_link(cot_database):
    profiles = profile_database(cot_database)
    pairs, report = rank_pairs(cot_database.schema, profiles, SimilarityMethod.OVERLAP, top_n=200,
                               database=cot_database)

    scores = {(str(p.a), str(p.b)): p.score for p in pairs}
    assert scores[("Paper.Journal", "Journal.Name")] == 1.0
    assert [p.score for p in pairs] == sorted((p.score for p in pairs), reverse=True)
    assert report.splitlines()[0].startswith("The pair with the 1st highest similarity is column ")


def test_pairs_never_join_a_table_to_itself_through_links(small_schema):
    profiles = {t.name: {c: profile_column(["1", "2"]) for c in t.column_names} for t in small_schema.tables}
    pairs, _ = rank_pairs(small_schema, profiles, top_n=100)

    linked = {("Writes.AuthorID", "Author.AuthorID"), ("Author.AuthorID", "Writes.AuthorID"),
              ("Writes.PaperID", "Paper.PaperID"), ("Paper.PaperID", "Writes.PaperID")}
    assert not linked & {(str(p.a), str(p.b)) for p in pairs}
    # two FK links plus Paper.PaperID against its own Venue FK
    assert len(pairs) == 7 * 6 // 2 - 3


def test_overlap_requires_payloads(cot_database):
    profiles = profile_database(cot_database)
    with pytest.raises(ValueError):
        rank_pairs(cot_database.schema, profiles, SimilarityMethod.OVERLAP)


def test_zero_top_n_gives_empty_report(cot_database):
    assert rank_pairs(cot_database.schema, profile_database(cot_database), top_n=0) == ([], "")


def test_embedding_report_parses_back(cot_database):
    profiles = profile_database(cot_database)
    pairs, report = rank_pairs(cot_database.schema, profiles, top_n=5, database=cot_database,
                               embedder=TrigramEmbedder(dimension=128))

    parsed = parse_similarity_report(report)
    assert len(parsed) == 5
    assert [(a, b) for a, b, _ in parsed] == [(p.a, p.b) for p in pairs]
    assert all(abs(score - p.score) < 1e-3 for (_, _, score), p in zip(parsed, pairs))


def test_parse_rejects_foreign_lines():
    with pytest.raises(ValueError):
        parse_similarity_report("something else entirely")


def test_subprocess_embedder_round_trip(tmp_path):
    script = tmp_path / "embedder.py"
    script.write_text(textwrap.dedent("""
        import json, sys
        for line in sys.stdin:
            request = json.loads(line)
            print(json.dumps({"id": request["id"], "vector": [len(request["text"]), 1.0, 0.0]}), flush=True)
    """))

    with SubprocessEmbedder([sys.executable, str(script)]) as embedder:
        first = embedder.embed("abc")
        second = embedder.embed("abcd")

    assert embedder.dimension == 3
    assert np.linalg.norm(first) == pytest.approx(1.0)
    assert not np.allclose(first, second)


def test_subprocess_embedder_closed_stream(tmp_path):
    script = tmp_path / "silent.py"
    script.write_text("import sys\nsys.stdin.readline()\n")
    embedder = SubprocessEmbedder([sys.executable, str(script)])
    with pytest.raises(EmbedderError):
        embedder.embed("hello")
    embedder.close()


def test_subprocess_embedder_missing_program():
    with pytest.raises(EmbedderError):
        SubprocessEmbedder(["/nonexistent/embedder-binary"])
