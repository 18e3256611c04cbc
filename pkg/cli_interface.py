import logging
import os
import threading
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from action_engine import Database, apply_script, load_action_script, write_database
from autog_planner import (
    DEFAULT_HARD_THRESHOLD, PlannerContext, build_context, infer_types_llm, run_autog_a, run_autog_s,
)
from chat_client import ChatClient, RecordingChatClient, client_from_spec
from graph_builder import GraphMode, build_graph, export_graph, graph_summary
from ingest_profile import infer_types, load_database, profile_database, render_stats_report
from join_discovery import Embedder, SubprocessEmbedder, rank_pairs
from models import DataLoadError, SimilarityMethod
from oracle_eval import (
    OracleReport, Task, load_tasks, parse_basket, rank_candidates, ranking_probe, score_candidate, score_candidates,
)
from schema_core import load_schema_file
from session import SessionEvent, SessionObserver, SessionState
from storage import ArtifactStorage
from synth_bench import BenchSpec, anonymize, generate, write_dataset

logger = logging.getLogger(__name__)

MODE_CHOICES = ("row2node", "row2node_edge", "both")


@dataclass
class RunConfig:
    """Everything a subcommand needs; built from flags and an optional YAML file"""
    schema: Optional[str] = None
    data: Optional[str] = None
    task: Optional[str] = None
    task_name: Optional[str] = None
    client: Optional[str] = None
    clients: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    runs: int = 1
    budget: Optional[float] = None
    seed: int = 0
    out: str = "out"
    mode: str = "both"
    method: str = "embedding"
    top_n: int = 20
    k: int = 5
    hard_threshold: int = DEFAULT_HARD_THRESHOLD
    basket: List[Dict[str, Any]] = field(default_factory=list)
    reflection: bool = True
    include_original: bool = True
    record: bool = False
    llm_types: bool = False
    embedder_command: Optional[List[str]] = None
    synth: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_sources(cls, flags: Mapping[str, Any], document: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """Merge config-file values under explicit flags (flags win when not None)"""
        known = set(cls.__dataclass_fields__)
        values: Dict[str, Any] = {}
        for key, value in (document or {}).items():
            key = str(key).replace("-", "_")
            if key in known:
                values[key] = value
            else:
                logger.warning("Ignoring unknown config key '%s'", key)
        for key, value in flags.items():
            if key in known and value is not None:
                values[key] = value
        return cls(**values)

    @property
    def data_root(self) -> Optional[str]:
        if self.data:
            return self.data
        return os.path.dirname(os.path.abspath(self.schema)) if self.schema else None

    @property
    def modes(self) -> List[GraphMode]:
        if self.mode == "both":
            return [GraphMode.ROW2NODE, GraphMode.ROW2NODE_EDGE]
        return [GraphMode.parse(self.mode)]

    def validate(self) -> Tuple[bool, str]:
        if self.mode not in MODE_CHOICES:
            return False, f"mode must be one of {', '.join(MODE_CHOICES)}"
        if self.runs < 1:
            return False, "runs must be at least 1"
        if self.hard_threshold < 1:
            return False, "hard_threshold must be at least 1"
        if self.budget is not None and not 0 < self.budget <= 1:
            return False, "budget must lie in (0, 1]"
        if self.client:
            kind, _, target = self.client.partition(":")
            if kind == "replay" and not target:
                return False, "replay mode needs a transcript path"
            if kind == "live":
                profile = self.clients.get(target)
                if not profile or not profile.get("endpoint"):
                    return False, f"live mode needs an endpoint in clients.{target}"
            if kind not in ("replay", "live"):
                return False, f"client must be replay:PATH or live:PROFILE, got '{self.client}'"
        return True, ""

    def seeds(self) -> Dict[str, Any]:
        return {"seed": self.seed, "runs": self.runs}


class CLIInterface(SessionObserver):
    """Subcommand handlers; prints progress to stdout and writes artifacts through ArtifactStorage"""

    def __init__(self, config: RunConfig, storage: Optional[ArtifactStorage] = None, quiet: bool = False):
        self.config = config
        self.storage = storage or ArtifactStorage(config.out)
        self.quiet = quiet
        self.print_lock = threading.Lock()

    def say(self, message: str) -> None:
        if self.quiet:
            return
        with self.print_lock:
            print(message)

    # Session observer callbacks

    def on_turn_started(self, event: SessionEvent) -> None:
        self.say(f"[{event.run_id}] turn {event.turn} ({event.action_count} actions so far)")

    def on_action_applied(self, event: SessionEvent) -> None:
        data = event.additional_data or {}
        self.say(f"[{event.run_id}] ✅ {data.get('action')}")
        for line in data.get("log", []):
            self.say(f"[{event.run_id}]    {line}")

    def on_action_failed(self, event: SessionEvent) -> None:
        data = event.additional_data or {}
        self.say(f"[{event.run_id}] ❌ {data.get('error')}")

    def on_session_finished(self, event: SessionEvent) -> None:
        data = event.additional_data or {}
        self.say(f"[{event.run_id}] finished: {data.get('reason')} after {event.action_count} actions")

    # Shared helpers

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self.config, n) in (None, "", [])]
        if missing:
            raise DataLoadError(f"Missing required option(s): {', '.join('--' + n.replace('_', '-') for n in missing)}")

    def load_database(self) -> Database:
        return load_database(load_schema_file(self.config.schema), self.config.data_root)

    def load_task(self) -> Task:
        self.require("task")
        tasks = load_tasks(self.config.task)
        if not tasks:
            raise DataLoadError(f"{self.config.task} declares no tasks")
        if self.config.task_name is None:
            return tasks[0]
        for task in tasks:
            if task.name == self.config.task_name:
                return task
        raise DataLoadError(f"No task named '{self.config.task_name}' in {self.config.task}")

    def embedder(self) -> Optional[Embedder]:
        if self.config.embedder_command:
            return SubprocessEmbedder(self.config.embedder_command)
        return None

    def method(self) -> SimilarityMethod:
        try:
            return SimilarityMethod(self.config.method)
        except ValueError:
            raise DataLoadError(f"Unknown similarity method '{self.config.method}'")

    def make_client(self) -> ChatClient:
        self.require("client")
        return client_from_spec(self.config.client, self.config.clients)

    def label_columns(self, task: Optional[Task]) -> Optional[Dict[str, str]]:
        if task is None or not task.label_column:
            return None
        return {task.target_type: task.label_column}

    def write_schema_and_data(self, database: Database, subdir: str = "") -> str:
        out_dir = self.storage.path(subdir) if subdir else self.storage.out_dir
        os.makedirs(out_dir, exist_ok=True)
        sub_storage = ArtifactStorage(out_dir) if subdir else self.storage
        write_database(database, out_dir, sub_storage)
        if subdir:
            for path in sub_storage.written:
                self.storage.track(path)
        return os.path.join(out_dir, "schema.yaml")

    # Subcommands

    def handle_profile(self) -> Dict[str, Any]:
        self.require("schema")
        database = self.load_database()
        profiles = profile_database(database, self.config.k, self.config.seed)
        report = render_stats_report(database.schema, profiles)
        self.storage.save_text("stats_report.txt", report)
        self.storage.save_json("profiles.json", {
            table: {column: asdict(profile) for column, profile in columns.items()}
            for table, columns in profiles.items()
        })
        self.say(f"📊 Profiled {sum(len(c) for c in profiles.values())} columns in {len(profiles)} tables")
        return {"tables": len(profiles)}

    def handle_infer_types(self) -> Dict[str, Any]:
        self.require("schema")
        database = self.load_database()
        profiles = profile_database(database, self.config.k, self.config.seed)

        if self.config.client:
            result = infer_types_llm(self.make_client(), render_stats_report(database.schema, profiles), profiles,
                                     self.config.seed)
            types, fallback = result.types, [f"{c.table}.{c.column}" for c in result.fallback_columns]
        else:
            types = {table: infer_types(columns) for table, columns in profiles.items()}
            fallback = []

        disagreements = []
        document: Dict[str, Any] = {}
        for table, columns in types.items():
            document[table] = {}
            for column, inferred in columns.items():
                document[table][column] = {"dtype": inferred.dtype.value, "confidence": inferred.confidence,
                                           "description": inferred.description}
                declared = database.schema.table(table).column(column)
                if declared is not None and not declared.dtype.is_key and declared.dtype != inferred.dtype:
                    disagreements.append(f"{table}.{column}: declared {declared.dtype.value}, "
                                         f"inferred {inferred.dtype.value}")

        self.storage.save_json("types.json", {"types": document, "fallback_columns": fallback,
                                              "disagreements": disagreements})
        self.say(f"🔎 Typed {sum(len(c) for c in document.values())} columns, "
                 f"{len(disagreements)} differ from the schema")
        for line in disagreements:
            self.say(f"   • {line}")
        return {"disagreements": len(disagreements), "fallback": len(fallback)}

    def handle_similarity(self) -> Dict[str, Any]:
        self.require("schema")
        database = self.load_database()
        profiles = profile_database(database, self.config.k, self.config.seed)
        embedder = self.embedder()
        try:
            pairs, report = rank_pairs(database.schema, profiles, self.method(), self.config.top_n,
                                       database=database, embedder=embedder)
        finally:
            if isinstance(embedder, SubprocessEmbedder):
                embedder.close()

        self.storage.save_text("similarity.txt", report)
        self.storage.save_json("pairs.json", [
            {"a": f"{p.a.table}.{p.a.column}", "b": f"{p.b.table}.{p.b.column}", "score": round(p.score, 6),
             "method": p.method.value}
            for p in pairs
        ])
        self.say(f"🔗 Ranked {len(pairs)} column pairs")
        return {"pairs": len(pairs)}

    def handle_apply(self, actions_path: str) -> Dict[str, Any]:
        self.require("schema")
        database = self.load_database()
        actions = load_action_script(actions_path)
        result = apply_script(database, actions)
        if result.error is not None:
            raise DataLoadError(f"Action {result.error.step} failed: {result.error}")

        schema_path = self.write_schema_and_data(result.state)
        self.storage.save_json("apply_log.json", {"steps": result.steps, "log": list(result.log),
                                                  "warnings": list(result.warnings)})
        self.say(f"🛠️  Applied {result.steps} actions; schema written to {schema_path}")
        for warning in result.warnings:
            self.say(f"   ⚠️  {warning}")
        return {"steps": result.steps, "schema": schema_path}

    def _client_factory(self, recorders: Dict[int, RecordingChatClient]):
        def factory(index: int) -> ChatClient:
            client = self.make_client()
            if self.config.record:
                client = RecordingChatClient(client)
                recorders[index] = client
            return client
        return factory

    def _context(self, database: Database, task: Optional[Task]) -> PlannerContext:
        embedder = self.embedder()
        try:
            return build_context(database, task.description if task else "", self.config.k, self.config.seed,
                                 self.method(), self.config.top_n, embedder, self.config.hard_threshold)
        finally:
            if isinstance(embedder, SubprocessEmbedder):
                embedder.close()

    def plan(self, database: Database, task: Optional[Task],
             context: Optional[PlannerContext] = None) -> Tuple[SessionState, List[OracleReport]]:
        """Run one session (runs == 1) or the multi-run search, saving transcripts when recording"""
        self.require("client")
        context = context or self._context(database, task)
        recorders: Dict[int, RecordingChatClient] = {}
        factory = self._client_factory(recorders)

        try:
            if self.config.runs == 1:
                state = run_autog_s(database, context, factory(0), self.config.hard_threshold,
                                    seed=self.config.seed, reflection=self.config.reflection, observers=[self])
                reports: List[OracleReport] = []
            else:
                if task is None:
                    raise DataLoadError("Several planner runs need a --task to choose between them")
                budget = self.config.budget
                state, reports = run_autog_a(
                    database, context, task, client_factory=factory, runs=self.config.runs,
                    seeds=[self.config.seed + i for i in range(self.config.runs)],
                    basket=parse_basket(self.config.basket, task), modes=self.config.modes,
                    budget_fraction=budget, hard_threshold=self.config.hard_threshold,
                    include_original=self.config.include_original, observers=[self])
        finally:
            for index, recorder in sorted(recorders.items()):
                name = "transcript.jsonl" if self.config.runs == 1 else f"transcript_run{index + 1}.jsonl"
                recorder.save(name, self.storage)
        return state, reports

    def handle_plan(self) -> Dict[str, Any]:
        self.require("schema")
        database = self.load_database()
        task = self.load_task() if self.config.task else None
        state, reports = self.plan(database, task)

        schema_path = self.write_schema_and_data(state.database)
        self.storage.save_json("session.json", state.to_dict())
        if reports:
            self.storage.save_json("oracle_reports.json", [r.to_dict() for r in reports])
        self.say(f"🧭 {state.run_id}: {state.action_count} actions, stopped by {state.stop_reason}")
        return {"run_id": state.run_id, "actions": state.action_count, "schema": schema_path}

    def handle_build_graph(self) -> Dict[str, Any]:
        self.require("schema")
        database = self.load_database()
        task = self.load_task() if self.config.task else None
        summaries = {}
        for mode in self.config.modes:
            graph = build_graph(database, mode, self.label_columns(task))
            export_graph(graph, self.storage.path(f"graph_{mode.value}"), self.storage)
            summary = graph_summary(graph)
            summaries[mode.value] = summary.to_dict()
            self.storage.save_text(f"graph_summary_{mode.value}.txt", summary.to_text() + "\n")
            self.say(f"🕸️  {mode.value}: {len(summary.node_counts)} node types, "
                     f"{len(summary.edge_counts)} edge types")
        self.storage.save_json("graph_summary.json", summaries)
        return {"modes": sorted(summaries)}

    def score_database(self, database: Database, task: Task, candidate_id: str,
                       action_count: int = 0) -> List[OracleReport]:
        basket = parse_basket(self.config.basket, task)
        reports = []
        for mode in self.config.modes:
            graph = build_graph(database, mode, self.label_columns(task))
            reports.append(score_candidate(graph, task, basket, f"{candidate_id}:{mode.value}", action_count,
                                           mode.value, self.config.budget))
        return reports

    def handle_evaluate(self) -> Dict[str, Any]:
        self.require("schema", "task")
        database = self.load_database()
        task = self.load_task()
        reports = self.score_database(database, task, "candidate")
        self.storage.save_json("oracle_report.json", [r.to_dict() for r in reports])
        for report in reports:
            flag = " (degraded)" if report.degraded else ""
            self.say(f"🎯 {report.mode}: aggregate {report.aggregate:.4f}{flag}")
        best = max(reports, key=lambda r: r.aggregate)
        return {"best_mode": best.mode, "aggregate": best.aggregate}

    def handle_compare(self, candidates: Sequence[str], probe_seeds: Sequence[int] = ()) -> Dict[str, Any]:
        """Rank candidate schemas (NAME=PATH or PATH) on one task"""
        task = self.load_task()
        if not candidates:
            raise DataLoadError("compare needs at least one candidate schema")

        graphs = {}
        for entry in candidates:
            name, _, path = entry.rpartition("=")
            path = path or entry
            name = name or os.path.basename(os.path.dirname(os.path.abspath(path))) or path
            database = load_database(load_schema_file(path), os.path.dirname(os.path.abspath(path)))
            for mode in self.config.modes:
                key = name if len(self.config.modes) == 1 else f"{name}:{mode.value}"
                graphs[key] = (build_graph(database, mode, self.label_columns(task)), 0)

        basket = parse_basket(self.config.basket, task)
        reports = score_candidates(graphs, task, basket, self.config.budget)
        ranking = rank_candidates(reports)
        document: Dict[str, Any] = {"ranking": ranking, "reports": [r.to_dict() for r in reports]}

        if probe_seeds and len(graphs) > 1:
            probes = ranking_probe(graphs, task, basket, probe_seeds)
            document["probe"] = [asdict(p) for p in probes]
            mean = sum(p.distance for p in probes) / len(probes)
            self.say(f"📐 Mean Kendall distance between early and full budget: {mean:.3f}")

        self.storage.save_json("ranking.json", document)
        for position, candidate_id in enumerate(ranking, 1):
            self.say(f"{position:2d}. {candidate_id}")
        return {"winner": ranking[0]}

    def handle_synth(self, anonymized: bool = False) -> Dict[str, Any]:
        settings = dict(self.config.synth)
        settings.setdefault("seed", self.config.seed)
        spec = BenchSpec.from_dict(settings)
        dataset = generate(spec)
        paths = write_dataset(dataset, self.storage.out_dir, self.storage)

        if anonymized:
            schema, database, name_map = anonymize(dataset.schema, dataset.database, spec.seed)
            paths["anonymized_schema"] = self.write_schema_and_data(database, "anonymized")
            paths["name_map"] = self.storage.save_json("name_map.json", name_map)

        challenges = ", ".join(sorted(c for c, on in spec.challenges.items() if on)) or "none"
        self.say(f"🧪 Synthesized {len(dataset.schema.tables)} tables (challenges: {challenges}) "
                 f"with {len(dataset.answer_key.actions)} answer-key actions")
        return paths


def run_end_to_end(config: RunConfig, cli: Optional[CLIInterface] = None) -> Dict[str, Any]:
    """profile, infer, similarity, plan, build, evaluate, rank; a failed stage skips everything after it"""
    cli = cli or CLIInterface(config)
    stages: Dict[str, str] = {}
    summary: Dict[str, Any] = {"stages": stages, "errors": {}}
    order = ("load", "profile", "infer", "similarity", "plan", "build", "evaluate", "rank")

    def fail(stage: str, error: Exception) -> Dict[str, Any]:
        logger.error("Stage %s failed: %s", stage, error)
        stages[stage] = "error"
        summary["errors"][stage] = str(error)
        for later in order[order.index(stage) + 1:]:
            stages[later] = "skipped"
        cli.storage.save_json("summary.json", summary)
        return summary

    try:
        cli.require("schema", "task", "client")
        database = cli.load_database()
        task = cli.load_task()
        stages["load"] = "ok"
    except ValueError as e:
        return fail("load", e)

    try:
        profiles = profile_database(database, config.k, config.seed)
        stats = render_stats_report(database.schema, profiles)
        cli.storage.save_text("stats_report.txt", stats)
        stages["profile"] = "ok"
    except ValueError as e:
        return fail("profile", e)

    try:
        if config.llm_types:
            result = infer_types_llm(cli.make_client(), stats, profiles, config.seed)
            types = result.types
            summary["type_fallback_columns"] = [f"{c.table}.{c.column}" for c in result.fallback_columns]
        else:
            types = {table: infer_types(columns) for table, columns in profiles.items()}
        summary["inferred_types"] = {t: {c: i.dtype.value for c, i in cols.items()} for t, cols in types.items()}
        stages["infer"] = "ok"
    except ValueError as e:
        return fail("infer", e)

    try:
        context = cli._context(database, task)
        cli.storage.save_text("similarity.txt", context.similarity_report)
        stages["similarity"] = "ok"
    except ValueError as e:
        return fail("similarity", e)

    try:
        state, _ = cli.plan(database, task, context)
        chosen = state.run_id if state.action_count else "original"
        summary["chosen"] = chosen
        summary["actions"] = [a.to_payload() for a in state.applied]
        summary["failures"] = list(state.failures)
        stages["plan"] = "ok"
    except ValueError as e:
        return fail("plan", e)

    try:
        cli.write_schema_and_data(state.database, "final")
        graphs = {}
        for mode in config.modes:
            graphs[mode.value] = build_graph(state.database, mode, cli.label_columns(task))
            summary.setdefault("graphs", {})[mode.value] = graph_summary(graphs[mode.value]).to_dict()["totals"]
        stages["build"] = "ok"
    except ValueError as e:
        return fail("build", e)

    try:
        basket = parse_basket(config.basket, task)
        candidates = {}
        for mode_name, graph in graphs.items():
            candidates[f"{chosen}:{mode_name}"] = (graph, state.action_count)
        if config.include_original and chosen != "original":
            for mode in config.modes:
                candidates[f"original:{mode.value}"] = (build_graph(database, mode, cli.label_columns(task)), 0)
        reports = score_candidates(candidates, task, basket, config.budget)
        summary["scores"] = {r.candidate_id: round(r.aggregate, 6) for r in reports}
        stages["evaluate"] = "ok"
    except ValueError as e:
        return fail("evaluate", e)

    ranking = rank_candidates(reports)
    summary["ranking"] = ranking
    summary["winner"] = ranking[0].split(":", 1)[0]
    stages["rank"] = "ok"
    cli.storage.save_json("summary.json", summary)
    cli.say(f"🏁 Winner: {summary['winner']} ({ranking[0]})")
    return summary


