import ast
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from action_engine import Database, apply_action, validate_action_payload
from chat_client import ChatClient
from graph_builder import GraphMode, build_graph
from ingest_profile import infer_types, profile_database, render_stats_report
from join_discovery import Embedder, rank_pairs
from models import (
    Action, ChatTransportError, ColumnKey, ColumnProfile, DataType, InferredType, OracleError, PlannerError,
    SimilarityMethod,
)
from oracle_eval import OracleReport, ScorerConfig, Task, rank_candidates, score_candidate
from prompts import ACTION_DOCS, AUGMENTATION_PROMPT, COT_EXAMPLE, REFLECTION_PROMPT, TYPE_INFERENCE_PROMPT
from schema_core import serialize_schema
from session import PlannerSession, SessionObserver, SessionState

logger = logging.getLogger(__name__)

DEFAULT_HARD_THRESHOLD = 10
DEFAULT_RUNS = 3
MODEL_CONFIDENCE = 1.0

SELECTION_PATTERN = re.compile(r"<selection>(.*?)</selection>", re.DOTALL | re.IGNORECASE)
FENCE_PATTERN = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")
BARE_KEY_PATTERN = re.compile(r"(?<=[{,])\s*([A-Za-z_][A-Za-z0-9_]*)\s*:")


@dataclass(frozen=True)
class PlannerContext:
    """Prompt pieces that stay fixed for a whole session"""
    stats_report: str
    task_description: str
    similarity_report: str
    action_docs: str = ACTION_DOCS
    cot_example: str = COT_EXAMPLE
    hard_threshold: int = DEFAULT_HARD_THRESHOLD


@dataclass(frozen=True)
class PromptBundle:
    stats_report: str
    task_description: str
    schema_yaml: str
    similarity_report: str
    action_docs: str
    cot_example: str
    history_actions: str
    hard_threshold: int = DEFAULT_HARD_THRESHOLD

    def render(self) -> str:
        return AUGMENTATION_PROMPT.format(
            actions=self.action_docs,
            example=self.cot_example,
            history_actions=self.history_actions,
            stats=self.stats_report,
            task=self.task_description,
            input_schema=self.schema_yaml,
            jtd=self.similarity_report,
        )


@dataclass(frozen=True)
class ParseError:
    """A selection (or one entry of it) the planner could not use"""
    code: str
    message: str
    entry: Optional[int] = None

    def __str__(self) -> str:
        where = f"entry {self.entry}: " if self.entry is not None else ""
        return f"{where}[{self.code}] {self.message}"


@dataclass(frozen=True)
class SelectionEntry:
    index: int
    action: Optional[Action] = None
    error: Optional[ParseError] = None


@dataclass(frozen=True)
class Selection:
    """Parsed `<selection>` block: entries in order, plus whether the model asked to stop"""
    entries: Tuple[SelectionEntry, ...] = ()
    terminal: bool = False
    error: Optional[ParseError] = None

    @property
    def actions(self) -> List[Action]:
        return [e.action for e in self.entries if e.action is not None]

    @property
    def errors(self) -> List[ParseError]:
        found = [e.error for e in self.entries if e.error is not None]
        return ([self.error] if self.error else []) + found

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass(frozen=True)
class TypeInferenceResult:
    types: Dict[str, Dict[str, InferredType]] = field(default_factory=dict)
    fallback: bool = False
    fallback_columns: Tuple[ColumnKey, ...] = ()

    def dtype(self, table: str, column: str) -> DataType:
        return self.types[table][column].dtype


def build_context(database: Database, task_description: str, k: int = 5, seed: int = 0,
                  method: SimilarityMethod = SimilarityMethod.EMBEDDING, top_n: int = 20,
                  embedder: Optional[Embedder] = None,
                  hard_threshold: int = DEFAULT_HARD_THRESHOLD) -> PlannerContext:
    """Statistics and similarity report for the current database"""
    profiles = profile_database(database, k, seed)
    stats = render_stats_report(database.schema, profiles)
    _, report = rank_pairs(database.schema, profiles, method, top_n, database=database, embedder=embedder)
    return PlannerContext(stats, task_description, report, hard_threshold=hard_threshold)


def assemble_prompt(state: SessionState, context: PlannerContext) -> List[Dict[str, str]]:
    bundle = PromptBundle(
        stats_report=context.stats_report,
        task_description=context.task_description,
        schema_yaml=serialize_schema(state.schema),
        similarity_report=context.similarity_report,
        action_docs=context.action_docs,
        cot_example=context.cot_example,
        history_actions=state.render_history(),
        hard_threshold=context.hard_threshold,
    )
    return [{"role": "user", "content": bundle.render()}]


def _payload_variants(body: str) -> List[str]:
    """Progressively looser spellings of a selection body"""
    variants = []
    for braces in (body, body.replace("{{", "{"), body.replace("{{", "{").replace("}}", "}")):
        for text in (braces, BARE_KEY_PATTERN.sub(r" '\1':", braces)):
            if text not in variants:
                variants.append(text)
    return variants


def _load_payload(body: str) -> Any:
    for text in _payload_variants(body):
        try:
            return json.loads(text)
        except (ValueError, RecursionError):
            pass
        try:
            return ast.literal_eval(text)
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            pass
    raise ValueError("selection is neither JSON nor a Python literal")


def parse_selection(completion: str) -> Selection:
    """Read the last `<selection>` block of a completion"""
    blocks = SELECTION_PATTERN.findall(completion or "")
    if not blocks:
        return Selection(error=ParseError("no-selection", "The output has no <selection>...</selection> block"))

    body = FENCE_PATTERN.sub("", blocks[-1].strip()).strip()
    if body.lower() in ("none", "", "[]"):
        return Selection(terminal=True)

    try:
        payload = _load_payload(body)
    except ValueError as e:
        return Selection(error=ParseError("unparseable", f"Could not parse the selection: {e}"))
    if isinstance(payload, dict):
        payload = [payload]
    if not isinstance(payload, (list, tuple)):
        return Selection(error=ParseError("unparseable", "The selection must be a list of actions"))

    entries = []
    for index, item in enumerate(payload, 1):
        if isinstance(item, dict) and str(item.get("action", "")).strip().lower() == "none":
            return Selection(tuple(entries), terminal=True)
        action, error = validate_action_payload(item)
        if error is not None:
            entries.append(SelectionEntry(index, error=ParseError(error.code, error.message, index)))
        else:
            entries.append(SelectionEntry(index, action=action))
    return Selection(tuple(entries))


def reflect(client: ChatClient, messages: Sequence[Dict[str, str]], draft_completion: str,
            seed: Optional[int] = None) -> str:
    """Ask the model to double-check its draft; raises ChatTransportError on transport failure"""
    conversation = list(messages) + [
        {"role": "assistant", "content": draft_completion},
        {"role": "user", "content": REFLECTION_PROMPT},
    ]
    return client.complete(conversation, seed=seed)


def _complete_turn(session: PlannerSession, client: ChatClient, context: PlannerContext,
                   reflection: bool) -> Selection:
    messages = assemble_prompt(session.state, context)
    seed = session.state.seed
    session.record_message("user", messages[-1]["content"])
    draft = client.complete(messages, seed=seed)
    session.record_message("assistant", draft)
    if not reflection:
        return parse_selection(draft)

    session.record_message("user", REFLECTION_PROMPT)
    revised = reflect(client, messages, draft, seed=seed)
    session.record_message("assistant", revised)
    selection = parse_selection(revised)
    if selection.error is not None and selection.error.code == "no-selection":
        fallback = parse_selection(draft)
        if fallback.error is None:
            logger.info("Reflection returned no selection; keeping the draft")
            return fallback
    return selection


def run_autog_s(database: Database, context: PlannerContext, client: ChatClient,
                hard_threshold: Optional[int] = None, max_turns: Optional[int] = None, seed: int = 0,
                run_id: str = "run1", reflection: bool = True,
                observers: Sequence[SessionObserver] = (), refresh_context: bool = False) -> SessionState:
    """One planning session; returns its final state"""
    threshold = hard_threshold if hard_threshold is not None else context.hard_threshold
    session = PlannerSession(database, threshold, seed, run_id)
    for observer in observers:
        session.add_observer(observer)
    max_turns = max_turns if max_turns is not None else 3 * threshold

    while session.state.turn < max_turns:
        session.begin_turn()
        if refresh_context and session.state.turn > 1:
            context = build_context(session.state.database, context.task_description, seed=seed,
                                    hard_threshold=context.hard_threshold)
        try:
            selection = _complete_turn(session, client, context, reflection)
        except ChatTransportError as e:
            raise session.fail(f"Chat client failed on turn {session.state.turn}: {e}") from e

        if selection.error is not None:
            session.record_failure(session.next_proposal(), selection.error)

        for entry in selection.entries:
            if session.state.at_threshold:
                break
            number = session.next_proposal()
            if entry.error is not None:
                session.record_failure(number, entry.error)
                continue
            result = apply_action(session.state.database, entry.action)
            if result.error is not None:
                session.record_failure(number, result.error, entry.action)
            else:
                session.record_applied(entry.action, result)

        if selection.terminal:
            return session.finish("terminal")
        if session.state.at_threshold:
            return session.finish("threshold")

    return session.finish("max_turns")


def _score_state(state: SessionState, task: Task, basket: Optional[Sequence[ScorerConfig]],
                 modes: Sequence[GraphMode], budget_fraction: Optional[float]) -> OracleReport:
    """Score both graph constructions of a candidate and keep the better one"""
    label_columns = {task.target_type: task.label_column} if task.label_column else None
    best: Optional[OracleReport] = None
    failures: Dict[str, str] = {}
    for mode in modes:
        try:
            graph = build_graph(state.database, mode, label_columns)
            report = score_candidate(graph, task, basket, state.run_id, state.action_count, mode.value,
                                     budget_fraction)
        except ValueError as e:
            failures[mode.value] = str(e)
            continue
        if best is None or report.aggregate > best.aggregate:
            best = report
    if best is None:
        raise OracleError(f"No graph of {state.run_id} could be scored: {failures}")
    return best


def run_autog_a(database: Database, context: PlannerContext, task: Task,
                client: Optional[ChatClient] = None,
                client_factory: Optional[Callable[[int], ChatClient]] = None,
                runs: int = DEFAULT_RUNS, seeds: Optional[Sequence[int]] = None,
                basket: Optional[Sequence[ScorerConfig]] = None,
                modes: Sequence[GraphMode] = (GraphMode.ROW2NODE, GraphMode.ROW2NODE_EDGE),
                budget_fraction: Optional[float] = None, hard_threshold: Optional[int] = None,
                max_workers: Optional[int] = None, include_original: bool = False,
                observers: Sequence[SessionObserver] = ()) -> Tuple[SessionState, List[OracleReport]]:
    """Several independent sessions, each scored by the oracle; the best candidate wins"""
    if runs < 1:
        raise ValueError(f"runs must be at least 1, got {runs}")
    if client is None and client_factory is None:
        raise ValueError("run_autog_a needs a client or a client factory")
    seeds = list(seeds) if seeds is not None else list(range(runs))
    if len(seeds) < runs:
        raise ValueError(f"Need {runs} seeds, got {len(seeds)}")

    def one_run(index: int) -> SessionState:
        run_client = client_factory(index) if client_factory is not None else client
        return run_autog_s(database, context, run_client, hard_threshold, seed=seeds[index],
                           run_id=f"run{index + 1}", observers=observers)

    causes: Dict[str, str] = {}
    states: Dict[str, SessionState] = {}
    if client_factory is None:
        # a shared client serves the runs one after another, in index order
        for index in range(runs):
            run_id = f"run{index + 1}"
            try:
                states[run_id] = one_run(index)
            except ValueError as e:
                logger.warning("Planner %s failed: %s", run_id, e)
                causes[run_id] = str(e)
    else:
        with ThreadPoolExecutor(max_workers=max_workers or runs) as pool:
            futures = [(f"run{i + 1}", pool.submit(one_run, i)) for i in range(runs)]
            for run_id, future in futures:
                try:
                    states[run_id] = future.result()
                except ValueError as e:
                    logger.warning("Planner %s failed: %s", run_id, e)
                    causes[run_id] = str(e)

    if include_original:
        states["original"] = SessionState(database, run_id="original", terminal=True, stop_reason="original")

    reports: Dict[str, OracleReport] = {}
    for run_id in sorted(states):
        try:
            reports[run_id] = _score_state(states[run_id], task, basket, modes, budget_fraction)
        except ValueError as e:
            logger.warning("Scoring %s failed: %s", run_id, e)
            causes[run_id] = str(e)

    if not reports:
        raise PlannerError("Every planner run failed", causes)

    ranking = rank_candidates(list(reports.values()))
    logger.info("Planner candidates ranked: %s", ", ".join(ranking))
    return states[ranking[0]], [reports[run_id] for run_id in ranking]


def _load_type_mapping(text: str) -> Any:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise ValueError("no mapping found")
    body = text[start:end + 1]
    try:
        return json.loads(body)
    except ValueError:
        return ast.literal_eval(body)


def _model_types(mapping: Any) -> Dict[str, Dict[str, InferredType]]:
    if not isinstance(mapping, dict):
        raise ValueError("the response is not a mapping of tables")
    types: Dict[str, Dict[str, InferredType]] = {}
    for table, columns in mapping.items():
        if not isinstance(columns, dict):
            continue
        for column, entry in columns.items():
            if isinstance(entry, (list, tuple)) and entry:
                spelling, description = entry[0], entry[1] if len(entry) > 1 else ""
            elif isinstance(entry, str):
                spelling, description = entry, ""
            else:
                continue
            try:
                dtype = DataType.parse(spelling)
            except ValueError:
                logger.info("Ignoring unknown type '%s' for %s.%s", spelling, table, column)
                continue
            types.setdefault(str(table), {})[str(column)] = InferredType(dtype, MODEL_CONFIDENCE, str(description))
    return types


def infer_types_llm(client: ChatClient, stats_report: str,
                    profiles: Mapping[str, Mapping[str, ColumnProfile]],
                    seed: Optional[int] = None) -> TypeInferenceResult:
    """Ask the model for column types; anything it leaves out or garbles comes from infer_types"""
    model_types: Dict[str, Dict[str, InferredType]] = {}
    failed = False
    try:
        response = client.complete([{"role": "user", "content": TYPE_INFERENCE_PROMPT + "\n" + stats_report}],
                                   seed=seed)
        model_types = _model_types(_load_type_mapping(response))
    except ChatTransportError as e:
        logger.warning("Type inference client failed, using deterministic inference: %s", e)
        failed = True
    except (ValueError, SyntaxError, TypeError) as e:
        logger.warning("Could not parse the type inference response, using deterministic inference: %s", e)
        failed = True

    types: Dict[str, Dict[str, InferredType]] = {}
    fallback_columns: List[ColumnKey] = []
    for table, table_profiles in profiles.items():
        deterministic = infer_types(table_profiles)
        for column in table_profiles:
            chosen = model_types.get(table, {}).get(column)
            if chosen is None:
                chosen = deterministic[column]
                fallback_columns.append(ColumnKey(table, column))
            types.setdefault(table, {})[column] = chosen

    if fallback_columns and not failed:
        logger.warning("Deterministic types used for %d columns the model did not type", len(fallback_columns))
    return TypeInferenceResult(types, failed or bool(fallback_columns), tuple(fallback_columns))
