import json
import logging
import math
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from jsonschema import Draft7Validator
from scipy import sparse
from scipy.stats import kendalltau, rankdata

from graph_builder import HeteroGraph, export_graph, homogeneous_view
from models import DataLoadError, HomophilyError, MetapathError, OracleError, hashable_cell, is_missing

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 100
DEFAULT_BUDGET = 0.1
DEFAULT_NEGATIVES = 100
DEFAULT_SAMPLE_RATIO = 0.3


class Objective(Enum):
    CLASSIFICATION = "classification"
    LINK_PREDICTION = "link_prediction"


class Metric(Enum):
    ACCURACY = "accuracy"
    AUC = "auc"
    MRR = "mrr"


class ScorerKind(Enum):
    LABEL_PROP = "label_prop"
    HOMOPHILY = "homophily"
    SAMPLED = "sampled"
    EXTERNAL = "external"
    LINK_PREDICTION = "link_prediction"


TASK_SCHEMA = {
    "type": "object",
    "required": ["name", "target_type"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "target_type": {"type": "string", "minLength": 1},
        "label_column": {"type": "string"},
        "objective": {"enum": [o.value for o in Objective]},
        "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "valid_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer"},
        "metric": {"enum": [m.value for m in Metric]},
        "description": {"type": "string"},
        "metapaths": {"type": "array", "items": {"type": "array", "items": {"type": "string"}}},
    },
}

TASK_FILE_SCHEMA = {
    "type": "object",
    "required": ["tasks"],
    "properties": {"tasks": {"type": "array", "items": TASK_SCHEMA}},
}

SCORER_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "name": {"type": "string"},
        "kind": {"enum": [k.value for k in ScorerKind]},
        "hops": {"type": "integer", "minimum": 1},
        "budget_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "max_iters": {"type": "integer", "minimum": 1},
        "ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "command": {"type": ["string", "array"]},
        "metapath": {"type": ["array", "null"], "items": {"type": "string"}},
        "timeout": {"type": "number", "exclusiveMinimum": 0},
    },
}


@dataclass(frozen=True)
class Task:
    """A downstream objective on one node type (classification) or relation (link prediction)"""
    name: str
    target_type: str
    label_column: str = ""
    objective: Objective = Objective.CLASSIFICATION
    train_fraction: float = 0.6
    valid_fraction: float = 0.2
    seed: int = 0
    metric: Metric = Metric.ACCURACY
    description: str = ""
    metapaths: Tuple[Tuple[str, ...], ...] = ()

    def __post_init__(self):
        if not (0 < self.train_fraction < 1 and 0 < self.valid_fraction < 1):
            raise OracleError(f"Task {self.name}: split fractions must lie in (0, 1)")
        if self.train_fraction + self.valid_fraction >= 1:
            raise OracleError(f"Task {self.name}: train and validation fractions must sum below 1")
        if self.objective == Objective.CLASSIFICATION and not self.label_column:
            raise OracleError(f"Task {self.name}: classification needs a label_column")
        object.__setattr__(self, "metapaths", tuple(tuple(p) for p in self.metapaths))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Task":
        errors = list(Draft7Validator(TASK_SCHEMA).iter_errors(data))
        if errors:
            raise OracleError(f"Invalid task: {errors[0].message}")
        objective = Objective(data.get("objective", Objective.CLASSIFICATION.value))
        default_metric = Metric.MRR if objective == Objective.LINK_PREDICTION else Metric.ACCURACY
        return cls(
            name=data["name"],
            target_type=data["target_type"],
            label_column=data.get("label_column", ""),
            objective=objective,
            train_fraction=data.get("train_fraction", 0.6),
            valid_fraction=data.get("valid_fraction", 0.2),
            seed=data.get("seed", 0),
            metric=Metric(data["metric"]) if "metric" in data else default_metric,
            description=data.get("description", ""),
            metapaths=tuple(tuple(p) for p in data.get("metapaths", [])),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "target_type": self.target_type,
            "label_column": self.label_column,
            "objective": self.objective.value,
            "train_fraction": self.train_fraction,
            "valid_fraction": self.valid_fraction,
            "seed": self.seed,
            "metric": self.metric.value,
            "description": self.description,
            "metapaths": [list(p) for p in self.metapaths],
        }


def parse_tasks(document: Any) -> List[Task]:
    errors = list(Draft7Validator(TASK_FILE_SCHEMA).iter_errors(document))
    if errors:
        raise DataLoadError(f"Invalid task file: {errors[0].message}")
    return [Task.from_dict(entry) for entry in document["tasks"]]


def load_tasks(path: str) -> List[Task]:
    from storage import load_json

    return parse_tasks(load_json(path))


@dataclass(frozen=True)
class ScorerConfig:
    kind: ScorerKind
    name: str = ""
    hops: int = 1
    budget_fraction: float = DEFAULT_BUDGET
    max_iters: int = DEFAULT_MAX_ITERS
    ratio: float = DEFAULT_SAMPLE_RATIO
    command: Optional[Tuple[str, ...]] = None
    metapath: Optional[Tuple[str, ...]] = None
    timeout: float = 600.0

    def __post_init__(self):
        if not self.name:
            suffix = f"_{self.hops}hop" if self.kind in (ScorerKind.LABEL_PROP, ScorerKind.SAMPLED) else ""
            object.__setattr__(self, "name", f"{self.kind.value}{suffix}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScorerConfig":
        errors = list(Draft7Validator(SCORER_SCHEMA).iter_errors(data))
        if errors:
            raise OracleError(f"Invalid scorer config: {errors[0].message}")
        command = data.get("command")
        if isinstance(command, str):
            command = shlex.split(command)
        metapath = data.get("metapath")
        return cls(
            kind=ScorerKind(data["kind"]),
            name=data.get("name", ""),
            hops=data.get("hops", 1),
            budget_fraction=data.get("budget_fraction", DEFAULT_BUDGET),
            max_iters=data.get("max_iters", DEFAULT_MAX_ITERS),
            ratio=data.get("ratio", DEFAULT_SAMPLE_RATIO),
            command=tuple(command) if command else None,
            metapath=tuple(metapath) if metapath else None,
            timeout=data.get("timeout", 600.0),
        )


def default_basket(task: Task) -> List[ScorerConfig]:
    """1-hop LP, 2-hop LP and rescaled homophily; MRR scoring for link prediction"""
    if task.objective == Objective.LINK_PREDICTION:
        return [ScorerConfig(ScorerKind.LINK_PREDICTION, hops=3)]
    return [
        ScorerConfig(ScorerKind.LABEL_PROP, hops=1),
        ScorerConfig(ScorerKind.LABEL_PROP, hops=2),
        ScorerConfig(ScorerKind.HOMOPHILY),
    ]


def parse_basket(entries: Optional[Sequence[Mapping[str, Any]]], task: Task) -> List[ScorerConfig]:
    if not entries:
        return default_basket(task)
    return [ScorerConfig.from_dict(entry) for entry in entries]


@dataclass(frozen=True)
class OracleReport:
    candidate_id: str
    per_scorer: Dict[str, float]
    aggregate: float
    budget_used: float
    action_count: int = 0
    mode: Optional[str] = None
    degraded: bool = False
    failures: Dict[str, str] = field(default_factory=dict)
    metric: str = Metric.ACCURACY.value

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _label_codes(values: Sequence[Any]) -> Tuple[np.ndarray, List[Any]]:
    """Class codes (-1 for missing) over sorted distinct labels"""
    keys = [None if is_missing(v) else hashable_cell(v) for v in values]
    classes = sorted({k for k in keys if k is not None}, key=lambda v: (type(v).__name__, v))
    index = {c: i for i, c in enumerate(classes)}
    codes = np.asarray([-1 if k is None else index[k] for k in keys], dtype=np.int64)
    return codes, classes


def split_nodes(labels: np.ndarray, task: Task) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation node indices among labelled nodes"""
    labelled = np.flatnonzero(labels >= 0)
    order = np.random.default_rng(task.seed).permutation(labelled)
    n_train = int(round(task.train_fraction * len(order)))
    n_valid = int(round(task.valid_fraction * len(order)))
    if len(order) >= 2:
        n_train = max(1, n_train)
        n_valid = max(1, min(n_valid, len(order) - n_train))
    return np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_valid])


def _target_labels(graph: HeteroGraph, task: Task) -> Tuple[np.ndarray, List[Any]]:
    node = graph.node_types.get(task.target_type)
    if node is None:
        raise OracleError(f"Task {task.name}: no node type '{task.target_type}' in the graph")
    if node.labels is None or node.label_column != task.label_column:
        raise OracleError(f"Task {task.name}: node type '{task.target_type}' carries no label '{task.label_column}'")
    return _label_codes(node.labels)


def _symmetric_simple(matrix: sparse.spmatrix) -> sparse.csr_matrix:
    matrix = sparse.csr_matrix(matrix)
    matrix = ((matrix + matrix.T) > 0).astype(np.float64)
    matrix = (matrix - sparse.diags(matrix.diagonal(), format="csr")).tocsr()
    matrix.eliminate_zeros()
    return matrix


def metapath_project(graph: HeteroGraph, node_type: str, path: Sequence[str]) -> sparse.csr_matrix:
    """Undirected simple adjacency over node_type: u~v when a walk along `path` joins them"""
    if node_type not in graph.node_types:
        raise MetapathError(f"Unknown node type '{node_type}'")
    n = graph.num_nodes(node_type)
    if not path:
        return sparse.csr_matrix((n, n), dtype=np.float64)

    current = node_type
    product = None
    for relation in path:
        if relation not in graph.edge_types:
            raise MetapathError(f"Unknown relation '{relation}'")
        edge = graph.edge_types[relation]
        if edge.source != current:
            raise MetapathError(f"Relation '{relation}' starts at {edge.source}, not {current}")
        step = graph.relation_adjacency(relation)
        product = step if product is None else (product @ step)
        product.data = np.minimum(product.data, 1.0)
        current = edge.destination
    if current != node_type:
        raise MetapathError(f"Metapath {list(path)} ends at {current}, not {node_type}")

    return _symmetric_simple(product)


def discover_metapaths(graph: HeteroGraph, node_type: str) -> List[Tuple[str, str]]:
    """Every symmetric two-step metapath (r, r_rev) leaving node_type"""
    return [(edge.relation, graph.twin(edge.relation)) for edge in graph.relations_from(node_type)
            if graph.twin(edge.relation) in graph.edge_types]


def adjusted_homophily(adjacency: sparse.spmatrix, labels: Sequence[int]) -> float:
    """Edge homophily corrected for degree-weighted class proportions"""
    labels = np.asarray(labels)
    edges = sparse.triu(_symmetric_simple(adjacency), k=1).tocoo()
    if edges.nnz == 0:
        raise HomophilyError("Adjusted homophily needs at least one edge")
    u, v = edges.row, edges.col
    if (labels[u] < 0).any() or (labels[v] < 0).any():
        raise HomophilyError("Every edge endpoint must be labelled")

    h_edge = float(np.mean(labels[u] == labels[v]))
    endpoint_classes = np.concatenate([labels[u], labels[v]])
    proportions = np.bincount(endpoint_classes) / (2.0 * edges.nnz)
    expected = float(np.sum(proportions ** 2))
    if 1.0 - expected <= 1e-12:
        raise HomophilyError("Adjusted homophily is undefined when every endpoint has the same class")
    return (h_edge - expected) / (1.0 - expected)


def _hop_adjacency(adjacency: sparse.csr_matrix, hops: int) -> sparse.csr_matrix:
    reach = adjacency.copy()
    power = adjacency.copy()
    for _ in range(hops - 1):
        power = power @ adjacency
        power.data = np.minimum(power.data, 1.0)
        reach = reach + power
    return _symmetric_simple(reach)


def _propagate(adjacency: sparse.csr_matrix, seeds: Dict[int, int], n_classes: int,
               iterations: int) -> Tuple[np.ndarray, np.ndarray]:
    """Majority-vote propagation; each node is labelled once, ties go to the smallest class"""
    n = adjacency.shape[0]
    state = np.full(n, -1, dtype=np.int64)
    shares = np.full((n, n_classes), np.nan)
    for node, label in seeds.items():
        state[node] = label

    for _ in range(iterations):
        unlabelled = np.flatnonzero(state < 0)
        labelled = np.flatnonzero(state >= 0)
        if len(unlabelled) == 0 or len(labelled) == 0:
            break
        one_hot = sparse.csr_matrix((np.ones(len(labelled)), (labelled, state[labelled])), shape=(n, n_classes))
        votes = np.asarray((adjacency[unlabelled] @ one_hot).todense())
        totals = votes.sum(axis=1)
        reached = totals > 0
        if not reached.any():
            break
        nodes = unlabelled[reached]
        state[nodes] = np.argmax(votes[reached], axis=1)
        shares[nodes] = votes[reached] / totals[reached][:, None]

    return state, shares


def _auc(truth: np.ndarray, scores: np.ndarray) -> float:
    positives = truth == 1
    n_pos, n_neg = int(positives.sum()), int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise OracleError("AUC is undefined when the validation split has a single class")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _classification_adjacency(graph: HeteroGraph, task: Task, hops: int,
                              metapath: Optional[Sequence[str]]) -> Tuple[sparse.csr_matrix, int]:
    if metapath:
        return _hop_adjacency(metapath_project(graph, task.target_type, metapath), hops), 0
    adjacency, offsets = homogeneous_view(graph)
    return _hop_adjacency(adjacency, hops), offsets[task.target_type]


def _propagation_score(adjacency: sparse.csr_matrix, offset: int, codes: np.ndarray, classes: List[Any],
                       train: np.ndarray, valid: np.ndarray, task: Task, iterations: int) -> float:
    if len(train) == 0:
        raise OracleError(f"Task {task.name}: no labelled training nodes")
    if len(valid) == 0:
        raise OracleError(f"Task {task.name}: empty validation split")

    seeds = {int(offset + i): int(codes[i]) for i in train}
    state, shares = _propagate(adjacency, seeds, len(classes), iterations)

    prior = np.bincount(codes[train], minlength=len(classes)) / len(train)
    majority = int(np.argmax(prior))
    predicted = state[offset + valid]
    predicted = np.where(predicted < 0, majority, predicted)
    truth = codes[valid]

    if task.metric == Metric.AUC:
        if len(classes) != 2:
            raise OracleError(f"Task {task.name}: AUC needs exactly two classes, found {len(classes)}")
        scores = shares[offset + valid, 1]
        scores = np.where(np.isnan(scores), prior[1], scores)
        return _auc(truth, scores)
    return float(np.mean(predicted == truth))


def label_prop_score(graph: HeteroGraph, task: Task, hops: int = 1, budget_fraction: float = DEFAULT_BUDGET,
                     max_iters: int = DEFAULT_MAX_ITERS, metapath: Optional[Sequence[str]] = None) -> float:
    """Validation metric of majority-vote label propagation under an iteration budget"""
    if hops < 1:
        raise OracleError("hops must be at least 1")
    codes, classes = _target_labels(graph, task)
    train, valid = split_nodes(codes, task)
    adjacency, offset = _classification_adjacency(graph, task, hops, metapath)
    iterations = max(1, math.ceil(budget_fraction * max_iters))
    return _propagation_score(adjacency, offset, codes, classes, train, valid, task, iterations)


def sampled_label_prop_score(graph: HeteroGraph, task: Task, hops: int = 1, budget_fraction: float = DEFAULT_BUDGET,
                             max_iters: int = DEFAULT_MAX_ITERS, ratio: float = DEFAULT_SAMPLE_RATIO) -> float:
    """Label propagation on a seeded node-induced subgraph keeping `ratio` of all nodes"""
    codes, classes = _target_labels(graph, task)
    train, valid = split_nodes(codes, task)
    adjacency, offsets = homogeneous_view(graph)
    offset = offsets[task.target_type]

    rng = np.random.default_rng(task.seed)
    keep = np.sort(rng.choice(adjacency.shape[0], size=max(1, int(round(ratio * adjacency.shape[0]))), replace=False))
    mask = np.zeros(adjacency.shape[0], dtype=bool)
    mask[keep] = True
    # Dropped nodes keep their index but lose every edge
    diagonal = sparse.diags(mask.astype(np.float64), format="csr")
    induced = (diagonal @ adjacency @ diagonal).tocsr()

    train = np.asarray([i for i in train if mask[offset + i]], dtype=np.int64)
    valid = np.asarray([i for i in valid if mask[offset + i]], dtype=np.int64)
    iterations = max(1, math.ceil(budget_fraction * max_iters))
    return _propagation_score(_hop_adjacency(induced, hops), offset, codes, classes, train, valid, task, iterations)


def homophily_score(graph: HeteroGraph, task: Task, metapath: Optional[Sequence[str]] = None) -> float:
    """(max adjusted homophily over metapaths + 1) / 2 on train-labelled nodes; 0.5 when uninformative"""
    codes, _ = _target_labels(graph, task)
    train, _ = split_nodes(codes, task)

    if metapath:
        paths = [tuple(metapath)]
    else:
        paths = [tuple(p) for p in task.metapaths] or discover_metapaths(graph, task.target_type)

    values = []
    for path in paths:
        try:
            adjacency = metapath_project(graph, task.target_type, path)
            induced = adjacency[train][:, train]
            values.append(adjusted_homophily(induced, codes[train]))
        except (MetapathError, HomophilyError) as e:
            logger.debug("Skipping metapath %s: %s", list(path), e)

    if not values:
        return 0.5
    return (max(values) + 1.0) / 2.0


def link_prediction_score(graph: HeteroGraph, task: Task, hops: int = 3,
                          negatives: int = DEFAULT_NEGATIVES) -> float:
    """MRR of held-out edges of the target relation ranked by walk counts against seeded negatives"""
    if task.target_type not in graph.edge_types:
        raise OracleError(f"Task {task.name}: no relation '{task.target_type}' in the graph")
    edge = graph.edge_types[task.target_type]
    if edge.count < 2:
        raise OracleError(f"Task {task.name}: relation '{edge.relation}' has too few edges")

    rng = np.random.default_rng(task.seed)
    order = rng.permutation(edge.count)
    n_valid = max(1, int(round(task.valid_fraction * edge.count)))
    held_out = order[:n_valid]

    adjacency, offsets = homogeneous_view(graph)
    src = edge.src[held_out] + offsets[edge.source]
    dst = edge.dst[held_out] + offsets[edge.destination]
    removal = sparse.coo_matrix((np.ones(len(src)), (src, dst)), shape=adjacency.shape).tocsr()
    removal = ((removal + removal.T) > 0).astype(np.float64)
    observed = adjacency - adjacency.multiply(removal)
    observed.eliminate_zeros()

    destination_count = graph.num_nodes(edge.destination)
    reciprocal_ranks = []
    for s, d in zip(src, dst):
        walk = sparse.csr_matrix(([1.0], ([0], [s])), shape=(1, adjacency.shape[0]))
        scores = np.zeros(adjacency.shape[0])
        for _ in range(hops):
            walk = walk @ observed
            scores += walk.toarray().ravel()

        pool = np.setdiff1d(np.arange(destination_count) + offsets[edge.destination], [d])
        sample = rng.choice(pool, size=min(negatives, len(pool)), replace=False) if len(pool) else pool
        positive = scores[d]
        greater = int(np.sum(scores[sample] > positive))
        ties = int(np.sum(scores[sample] == positive))
        reciprocal_ranks.append(1.0 / (1.0 + greater + 0.5 * ties))

    return float(np.mean(reciprocal_ranks))


class ExternalOracle:
    """Runs an external trainer once per request over stdio"""

    def __init__(self, command: Sequence[str], timeout: float = 600.0):
        if not command:
            raise OracleError("External oracle needs a command")
        self.command = list(command)
        self.timeout = timeout

    def score(self, graph: HeteroGraph, task: Task, budget_fraction: float, seed: int) -> Tuple[float, str]:
        with tempfile.TemporaryDirectory(prefix="relgraph-oracle-") as graph_dir:
            export_graph(graph, graph_dir)
            request = {"graph_dir": graph_dir, "task": task.to_dict(), "budget_fraction": budget_fraction,
                       "seed": seed}
            try:
                completed = subprocess.run(self.command, input=json.dumps(request) + "\n", capture_output=True,
                                           text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise OracleError(f"External oracle {self.command[0]} failed: {e}") from e

        lines = [line for line in completed.stdout.splitlines() if line.strip()]
        if not lines:
            raise OracleError(f"External oracle produced no output (exit {completed.returncode})")
        try:
            response = json.loads(lines[0])
        except json.JSONDecodeError as e:
            raise OracleError(f"External oracle sent invalid JSON: {e}") from e
        if "error" in response:
            raise OracleError(f"External oracle error: {response['error']}")
        if not isinstance(response.get("score"), (int, float)):
            raise OracleError(f"External oracle response has no numeric score: {lines[0][:200]}")
        return float(response["score"]), str(response.get("metric", task.metric.value))


def _run_scorer(graph: HeteroGraph, task: Task, config: ScorerConfig, budget: float) -> float:
    if config.kind == ScorerKind.LABEL_PROP:
        return label_prop_score(graph, task, config.hops, budget, config.max_iters, config.metapath)
    if config.kind == ScorerKind.HOMOPHILY:
        return homophily_score(graph, task, config.metapath)
    if config.kind == ScorerKind.SAMPLED:
        return sampled_label_prop_score(graph, task, config.hops, budget, config.max_iters, config.ratio)
    if config.kind == ScorerKind.LINK_PREDICTION:
        return link_prediction_score(graph, task, config.hops)

    score, metric = ExternalOracle(config.command or (), config.timeout).score(graph, task, budget, task.seed)
    if metric != task.metric.value:
        logger.warning("External oracle %s reported metric %s for a %s task", config.name, metric, task.metric.value)
    return score


def score_candidate(graph: HeteroGraph, task: Task, basket: Optional[Sequence[ScorerConfig]] = None,
                    candidate_id: str = "candidate", action_count: int = 0, mode: Optional[str] = None,
                    budget_fraction: Optional[float] = None) -> OracleReport:
    """Run every scorer of the basket and average the survivors"""
    basket = list(basket) if basket else default_basket(task)
    per_scorer: Dict[str, float] = {}
    failures: Dict[str, str] = {}
    budgets = []

    for config in basket:
        budget = budget_fraction if budget_fraction is not None else config.budget_fraction
        budgets.append(budget)
        try:
            per_scorer[config.name] = _run_scorer(graph, task, config, budget)
        except (ValueError, OSError) as e:
            logger.warning("Scorer %s failed on %s: %s", config.name, candidate_id, e)
            failures[config.name] = str(e)

    if not per_scorer:
        raise OracleError(f"Every scorer failed on {candidate_id}: {failures}")

    aggregate = float(np.mean(list(per_scorer.values())))
    return OracleReport(candidate_id, per_scorer, aggregate, max(budgets), action_count, mode,
                        bool(failures), failures, task.metric.value)


def score_candidates(candidates: Mapping[str, Tuple[HeteroGraph, int]], task: Task,
                     basket: Optional[Sequence[ScorerConfig]] = None, budget_fraction: Optional[float] = None,
                     max_workers: int = 4) -> List[OracleReport]:
    """Score candidates concurrently; reports come back in candidate id order"""
    names = sorted(candidates)
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        futures = {
            name: pool.submit(score_candidate, candidates[name][0], task, basket, name, candidates[name][1],
                              None, budget_fraction)
            for name in names
        }
        return [futures[name].result() for name in names]


def rank_candidates(reports: Sequence[OracleReport]) -> List[str]:
    """Best aggregate first; ties go to fewer actions, then to the lexically smaller id"""
    ordered = sorted(reports, key=lambda r: (-r.aggregate, r.action_count, r.candidate_id))
    return [r.candidate_id for r in ordered]


def kendall_tau_distance(rank_a: Sequence[str], rank_b: Sequence[str]) -> float:
    """Share of discordant pairs between two rankings of the same ids"""
    if len(set(rank_a)) != len(rank_a) or len(set(rank_b)) != len(rank_b):
        raise OracleError("Rankings must not repeat ids")
    if set(rank_a) != set(rank_b):
        raise OracleError("Rankings must cover the same ids")
    if len(rank_a) < 2:
        raise OracleError("Kendall distance needs at least two ids")

    position = {item: i for i, item in enumerate(rank_b)}
    result = kendalltau(np.arange(len(rank_a)), [position[item] for item in rank_a])
    distance = (1.0 - float(result[0])) / 2.0
    return min(1.0, max(0.0, distance))


@dataclass(frozen=True)
class ProbeResult:
    seed: int
    full_ranking: List[str]
    early_ranking: List[str]
    distance: float


def ranking_probe(candidates: Mapping[str, Tuple[HeteroGraph, int]], task: Task,
                  basket: Optional[Sequence[ScorerConfig]] = None, seeds: Sequence[int] = (0,),
                  early_budget: float = DEFAULT_BUDGET, full_budget: float = 1.0) -> List[ProbeResult]:
    """Compare full-budget and early-budget rankings per seed"""
    if len(candidates) < 2:
        raise OracleError("A ranking probe needs at least two candidates")
    results = []
    for seed in seeds:
        seeded = replace(task, seed=seed)
        full = rank_candidates(score_candidates(candidates, seeded, basket, full_budget))
        early = rank_candidates(score_candidates(candidates, seeded, basket, early_budget))
        results.append(ProbeResult(seed, full, early, kendall_tau_distance(full, early)))
    return results
