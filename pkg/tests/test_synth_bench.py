import json
import os

import numpy as np
import pytest

from action_engine import apply_script
from graph_builder import GraphMode, build_graph
from models import Action, ActionKind
from oracle_eval import adjusted_homophily, homophily_score, metapath_project, ranking_probe
from synth_bench import (
    PLANTED_METAPATH, AnswerKey, BenchSpec, action_signature, anonymize, generate, restore_names, score_against_key,
    write_dataset,
)


@pytest.fixture(scope="module")
def dataset():
    return generate(BenchSpec(seed=1, n_papers=80, n_authors=20))


@pytest.mark.parametrize("overrides", [
    {"c1_renamed_fk": False, "c2_self_induced": False, "c3_edge_table_with_spurious_pk": False,
     "c4_dual_tasks": False},
    {"n_papers": 5},
    {"n_communities": 1},
    {"authors_per_paper": 20},
    {"flip_noise": 1.0},
])
def test_bench_spec_rejects_bad_settings(overrides):
    with pytest.raises(ValueError):
        BenchSpec(**overrides)


def test_bench_spec_short_challenge_names():
    spec = BenchSpec.from_dict({"c1": False, "c4": False, "seed": 3, "colour": "blue"})
    assert spec.seed == 3
    assert spec.challenges == {"c1": False, "c2": True, "c3": True, "c4": False}


def test_generation_is_seeded(dataset):
    again = generate(BenchSpec(seed=1, n_papers=80, n_authors=20))
    other = generate(BenchSpec(seed=2, n_papers=80, n_authors=20))

    assert again.database.tables["Paper"].columns == dataset.database.tables["Paper"].columns
    assert again.database.tables["Writes"].columns == dataset.database.tables["Writes"].columns
    assert other.database.tables["Paper"].columns != dataset.database.tables["Paper"].columns


def test_generated_tables(dataset):
    database = dataset.database
    assert dataset.schema.table_names == ["Paper", "Author", "Writes"]
    assert database.row_count("Paper") == 80
    assert database.row_count("Writes") == 80 * 3
    assert dataset.schema.table("Writes").column("PaperRef") is not None
    assert dataset.schema.table("Writes").primary_key.name == "WriteID"
    assert all(isinstance(k, list) for k in database.tables["Paper"].column("Keywords"))
    assert [t.name for t in dataset.tasks] == ["venue", "year"]
    assert dataset.tasks[0].metapaths == (PLANTED_METAPATH,)


def test_answer_key_replays(dataset):
    key = dataset.answer_key
    result = apply_script(dataset.database, list(key.actions))

    assert result.error is None
    assert result.steps == 4
    assert key.challenges == ("c1", "c3", "c2", "c2")
    assert key.expected_counts() == {"c1": 1, "c2": 2, "c3": 1}
    assert key.table_roles["Writes"] == "edge"
    assert key.table_roles["Field"] == "dummy_node"
    assert (key.better_task, key.worse_task) == ("venue", "year")


def test_disabled_challenges_leave_no_key_actions():
    dataset = generate(BenchSpec(n_papers=40, n_authors=20, c1_renamed_fk=False, c2_self_induced=False,
                                 c3_edge_table_with_spurious_pk=False))
    writes = dataset.schema.table("Writes")

    assert dataset.answer_key.actions == ()
    assert writes.column("PaperID").is_foreign_key
    assert writes.primary_key is None
    assert "Keywords" not in dataset.schema.table("Paper").column_names


def test_only_venue_task_without_dual_tasks():
    dataset = generate(BenchSpec(n_papers=40, n_authors=20, c4_dual_tasks=False))
    assert [t.name for t in dataset.tasks] == ["venue"]
    assert dataset.answer_key.better_task is None
    assert "Year" not in dataset.schema.table("Paper").column_names


def test_write_dataset(dataset, tmp_path):
    paths = write_dataset(dataset, str(tmp_path))

    assert set(paths) == {"schema", "tasks", "answer_key"}
    assert all(os.path.isfile(p) for p in paths.values())
    assert os.path.isfile(tmp_path / "data" / "Writes.csv")
    with open(paths["answer_key"]) as f:
        document = json.load(f)
    assert [entry["challenge"] for entry in document["actions"]] == ["c1", "c3", "c2", "c2"]
    assert AnswerKey.from_dict(document).to_dict() == document
    with open(paths["tasks"]) as f:
        assert [t["name"] for t in json.load(f)["tasks"]] == ["venue", "year"]


def test_anonymize_hides_names_and_keeps_values(dataset):
    schema, database, name_map = anonymize(dataset.schema, dataset.database, seed=4)

    paper = name_map["tables"]["Paper"]
    title = name_map["columns"]["Paper"]["Title"]
    assert paper.startswith("t") and title.startswith("c")
    assert not set(schema.table_names) & {"Paper", "Author", "Writes"}
    assert database.tables[paper].column(title) == dataset.database.tables["Paper"].column("Title")
    author_fk = schema.table(name_map["tables"]["Writes"]).column(name_map["columns"]["Writes"]["AuthorID"])
    assert author_fk.link_to == f"{name_map['tables']['Author']}.{name_map['columns']['Author']['AuthorID']}"


def test_restore_names_undoes_anonymize(dataset):
    state = apply_script(dataset.database, list(dataset.answer_key.actions)).state
    _, anonymized, name_map = anonymize(state.schema, state, seed=4)
    restored = restore_names(anonymized, name_map)

    assert restored.schema.table_names == state.schema.table_names
    assert restored.schema.dummy_names == state.schema.dummy_names
    assert restored.schema.table("Writes").column_names == state.schema.table("Writes").column_names
    assert restored.schema.table("Paper").source == state.schema.table("Paper").source
    assert restored.key_spaces == state.key_spaces


def test_signature_ignores_chosen_names_and_translates_tokens(dataset):
    _, _, name_map = anonymize(dataset.schema, dataset.database, seed=4)
    tables, columns = name_map["tables"], name_map["columns"]

    planted = Action(ActionKind.CONNECT_TWO_COLUMNS, {
        "table_1_name": "Writes", "table_1_col_name": "PaperRef",
        "table_2_name": "Paper", "table_2_col_name": "PaperID"})
    swapped = Action(ActionKind.CONNECT_TWO_COLUMNS, {
        "table_1_name": tables["Paper"], "table_1_col_name": columns["Paper"]["PaperID"],
        "table_2_name": tables["Writes"], "table_2_col_name": columns["Writes"]["PaperRef"]})
    assert action_signature(swapped, name_map) == action_signature(planted)

    first = Action(ActionKind.GENERATE_OR_CONNECT_DUMMY_TABLE, {
        "base_table_name": "Paper", "orig_col_name": "Field", "new_table_name": "Field", "new_col_name": "Field"})
    second = Action(ActionKind.GENERATE_OR_CONNECT_DUMMY_TABLE, {
        "base_table_name": "Paper", "orig_col_name": "Field", "new_table_name": "Area", "new_col_name": "AreaName"})
    assert action_signature(first) == action_signature(second)


def test_score_against_key(dataset):
    key = dataset.answer_key

    full = score_against_key(key.actions, key)
    assert full.fractions == {"c1": 1.0, "c2": 1.0, "c3": 1.0}

    partial = score_against_key([key.actions[2], Action.none()], key)
    assert partial.counts == {"c1": (0, 1), "c2": (1, 2), "c3": (0, 1)}
    assert partial.fractions["c2"] == 0.5
    assert partial.to_text().splitlines() == ["c1: 0/1", "c2: 1/2", "c3: 0/1"]
    assert partial.to_dict()["c2"] == {"matched": 1, "expected": 2}


def test_repeated_applied_action_counts_once(dataset):
    key = dataset.answer_key
    report = score_against_key([key.actions[0], key.actions[0]], key)
    assert report.counts["c1"] == (1, 1)


def _planted_graph(seed, label):
    dataset = generate(BenchSpec(seed=seed))
    state = apply_script(dataset.database, list(dataset.answer_key.actions)).state
    return dataset, build_graph(state, GraphMode.ROW2NODE_EDGE, {"Paper": label})


def _codes(labels):
    return np.unique(np.asarray(labels), return_inverse=True)[1]


@pytest.mark.parametrize("seed", range(20))
def test_planted_metapath_separates_tasks(seed):
    dataset, venue_graph = _planted_graph(seed, "Venue")
    _, year_graph = _planted_graph(seed, "Year")
    projection = metapath_project(venue_graph, "Paper", PLANTED_METAPATH)

    venue = adjusted_homophily(projection, _codes(venue_graph.node_types["Paper"].labels))
    year = adjusted_homophily(projection, _codes(year_graph.node_types["Paper"].labels))
    assert venue >= 0.3
    assert abs(year) <= 0.1

    venue_task, year_task = dataset.tasks
    planted_gap = homophily_score(venue_graph, venue_task) - homophily_score(year_graph, year_task)
    original = {label: build_graph(dataset.database, GraphMode.ROW2NODE_EDGE, {"Paper": label})
                for label in ("Venue", "Year")}
    original_gap = homophily_score(original["Venue"], venue_task) - homophily_score(original["Year"], year_task)
    assert original_gap == 0.0
    assert planted_gap >= 0.2


def test_planted_relation_ranks_first_at_every_budget():
    dataset = generate(BenchSpec(seed=0))
    harmful = Action(ActionKind.GENERATE_OR_CONNECT_DUMMY_TABLE, {
        "base_table_name": "Paper", "orig_col_name": "Batch", "new_table_name": "Batch", "new_col_name": "Batch"})
    states = {
        "original": (dataset.database, 0),
        "harmful": (apply_script(dataset.database, [harmful]).state, 1),
        "planted": (apply_script(dataset.database, list(dataset.answer_key.actions)).state,
                    len(dataset.answer_key.actions)),
    }
    candidates = {name: (build_graph(database, GraphMode.ROW2NODE_EDGE, {"Paper": "Venue"}), count)
                  for name, (database, count) in states.items()}

    results = ranking_probe(candidates, dataset.tasks[0], seeds=range(10))

    assert [r.seed for r in results] == list(range(10))
    for result in results:
        assert result.full_ranking[0] == "planted"
        assert result.distance == 0
