import json
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import sparse

from models import ColumnDef, DatasetSchema, GraphBuildError, TableDef, is_missing

logger = logging.getLogger(__name__)

REVERSE_SUFFIX = "_rev"


class GraphMode(Enum):
    """How tables map onto graph elements"""
    ROW2NODE = "row2node"
    ROW2NODE_EDGE = "row2node_edge"

    @classmethod
    def parse(cls, spelling: str) -> "GraphMode":
        key = str(spelling).strip().lower().replace("/", "_").replace("-", "_")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"Unknown graph mode '{spelling}'")


class Role(Enum):
    NODE = "node"
    EDGE = "edge"
    DUMMY_NODE = "dummy_node"


@dataclass(frozen=True)
class TableRole:
    table: str
    role: Role


@dataclass(frozen=True)
class NodeType:
    name: str
    count: int
    features: Dict[str, list] = field(default_factory=dict)
    timestamps: Optional[list] = None
    label_column: Optional[str] = None
    labels: Optional[list] = None


@dataclass(frozen=True)
class EdgeType:
    """One directed relation with its endpoint index arrays"""
    source: str
    relation: str
    destination: str
    src: np.ndarray
    dst: np.ndarray
    features: Dict[str, list] = field(default_factory=dict)
    timestamps: Optional[list] = None
    twin: Optional[str] = None

    @property
    def count(self) -> int:
        return int(len(self.src))

    def adjacency(self, source_count: int, destination_count: int) -> sparse.csr_matrix:
        data = np.ones(self.count, dtype=np.float64)
        matrix = sparse.coo_matrix((data, (self.src, self.dst)), shape=(source_count, destination_count))
        return matrix.tocsr()


@dataclass(frozen=True)
class HeteroGraph:
    node_types: Dict[str, NodeType] = field(default_factory=dict)
    edge_types: Dict[str, EdgeType] = field(default_factory=dict)

    def num_nodes(self, node_type: str) -> int:
        return self.node_types[node_type].count

    def relation(self, name: str) -> EdgeType:
        if name not in self.edge_types:
            raise KeyError(f"Unknown relation '{name}'")
        return self.edge_types[name]

    def relations_from(self, node_type: str) -> List[EdgeType]:
        return [e for name, e in sorted(self.edge_types.items()) if e.source == node_type]

    def twin(self, name: str) -> str:
        """Name of the relation running the other way"""
        return self.relation(name).twin or reverse_name(name)

    def relation_adjacency(self, name: str) -> sparse.csr_matrix:
        edge = self.relation(name)
        return edge.adjacency(self.num_nodes(edge.source), self.num_nodes(edge.destination))


def reverse_name(relation: str) -> str:
    return relation + REVERSE_SUFFIX


def _free_name(edge_types: Dict[str, EdgeType], name: str) -> str:
    candidate, counter = name, 1
    while candidate in edge_types:
        counter += 1
        candidate = f"{name}_{counter}"
    if candidate != name:
        logger.warning("Relation name '%s' is taken; using '%s'", name, candidate)
    return candidate


def classify_tables(schema: DatasetSchema, mode: GraphMode) -> List[TableRole]:
    """Assign node/edge roles; under row2node_edge a PK-less table with exactly two FKs is an edge"""
    roles = []
    for table in schema.tables:
        role = Role.NODE
        if mode == GraphMode.ROW2NODE_EDGE and table.primary_key is None:
            fk_count = len(table.foreign_keys)
            if fk_count == 2:
                role = Role.EDGE
            elif fk_count > 2:
                logger.warning("Table %s has %d foreign keys and no primary key; keeping it as a node type",
                               table.name, fk_count)
        roles.append(TableRole(table.name, role))

    roles.extend(TableRole(dummy.name, Role.DUMMY_NODE) for dummy in schema.derived)
    return roles


def _feature_columns(table: TableDef, label_column: Optional[str]) -> List[ColumnDef]:
    skipped = {label_column, table.time_column}
    return [c for c in table.columns if not c.dtype.is_key and c.name not in skipped]


def _endpoint_indices(database, table: TableDef, column: ColumnDef,
                      pk_index: Dict[str, Dict[Any, int]]) -> List[Optional[int]]:
    """Row position in the target type for every FK cell (None for null links)"""
    values = database.tables[table.name].column(column.name)
    target = column.link_table

    if database.schema.dummy(target) is not None:
        size = len(database.key_spaces.get(target, ()))
        for value in values:
            if value is not None and not 0 <= value < size:
                raise GraphBuildError(f"{table.name}.{column.name} holds code {value} outside the "
                                      f"{size} keys of {target}")
        return list(values)

    lookup = pk_index[target]
    indices = []
    for value in values:
        if is_missing(value):
            indices.append(None)
            continue
        position = lookup.get(value)
        if position is None:
            raise GraphBuildError(f"{table.name}.{column.name} value {value!r} is not a key of {target}")
        indices.append(position)
    return indices


def _add_relation(edge_types: Dict[str, EdgeType], edge: EdgeType) -> None:
    """Insert a relation and its reverse, suffixing a counter onto names already in use"""
    forward = _free_name(edge_types, edge.relation)
    edge_types[forward] = edge
    backward = _free_name(edge_types, reverse_name(forward))
    edge_types[forward] = replace(edge, relation=forward, twin=backward)
    edge_types[backward] = EdgeType(edge.destination, backward, edge.source, edge.dst, edge.src,
                                    edge.features, edge.timestamps, twin=forward)


def build_graph(database, mode: GraphMode = GraphMode.ROW2NODE_EDGE,
                label_columns: Optional[Mapping[str, str]] = None) -> HeteroGraph:
    """Turn a Database into a heterogeneous graph under the chosen table-role heuristic"""
    label_columns = dict(label_columns or {})
    schema = database.schema
    roles = {r.table: r.role for r in classify_tables(schema, mode)}

    node_types: Dict[str, NodeType] = {}
    pk_index: Dict[str, Dict[Any, int]] = {}

    for table in schema.tables:
        data = database.tables[table.name]
        if table.primary_key is not None:
            pk_index[table.name] = {v: i for i, v in enumerate(data.column(table.primary_key.name))}
        if roles[table.name] != Role.NODE:
            continue

        label = label_columns.get(table.name)
        if label is not None and not table.has_column(label):
            raise GraphBuildError(f"Label column '{label}' is not a column of {table.name}")
        features = {c.name: data.column(c.name) for c in _feature_columns(table, label)}
        timestamps = data.column(table.time_column) if table.time_column else None
        node_types[table.name] = NodeType(table.name, data.row_count, features, timestamps, label,
                                          data.column(label) if label else None)

    for dummy in schema.derived:
        node_types[dummy.name] = NodeType(dummy.name, len(database.key_spaces.get(dummy.name, ())))

    edge_types: Dict[str, EdgeType] = {}
    for table in schema.tables:
        data = database.tables[table.name]
        timestamps = data.column(table.time_column) if table.time_column else None

        if roles[table.name] == Role.EDGE:
            first, second = table.foreign_keys
            src = _endpoint_indices(database, table, first, pk_index)
            dst = _endpoint_indices(database, table, second, pk_index)
            keep = [i for i, (s, d) in enumerate(zip(src, dst)) if s is not None and d is not None]
            features = {c.name: [data.column(c.name)[i] for i in keep] for c in _feature_columns(table, None)}
            _add_relation(edge_types, EdgeType(
                first.link_table, table.name, second.link_table,
                np.asarray([src[i] for i in keep], dtype=np.int64), np.asarray([dst[i] for i in keep], dtype=np.int64),
                features, [timestamps[i] for i in keep] if timestamps else None))
            continue

        for column in table.foreign_keys:
            dst = _endpoint_indices(database, table, column, pk_index)
            keep = [i for i, d in enumerate(dst) if d is not None]
            _add_relation(edge_types, EdgeType(
                table.name, f"{table.name}_{column.name}", column.link_table,
                np.asarray(keep, dtype=np.int64), np.asarray([dst[i] for i in keep], dtype=np.int64),
                {}, [timestamps[i] for i in keep] if timestamps else None))

    logger.debug("Built graph with %d node types and %d edge types", len(node_types), len(edge_types))
    return HeteroGraph(node_types, edge_types)


def homogeneous_view(graph: HeteroGraph) -> Tuple[sparse.csr_matrix, Dict[str, int]]:
    """All node types stacked into one undirected adjacency; returns it with each type's offset"""
    offsets: Dict[str, int] = {}
    total = 0
    for name in sorted(graph.node_types):
        offsets[name] = total
        total += graph.node_types[name].count

    rows, cols = [], []
    for edge in graph.edge_types.values():
        rows.append(edge.src + offsets[edge.source])
        cols.append(edge.dst + offsets[edge.destination])
    if rows:
        row = np.concatenate(rows)
        col = np.concatenate(cols)
    else:
        row = col = np.zeros(0, dtype=np.int64)

    matrix = sparse.coo_matrix((np.ones(len(row)), (row, col)), shape=(total, total)).tocsr()
    matrix = ((matrix + matrix.T) > 0).astype(np.float64)
    matrix = (matrix - sparse.diags(matrix.diagonal(), format="csr")).tocsr()
    matrix.eliminate_zeros()
    return matrix, offsets


@dataclass(frozen=True)
class GraphSummary:
    node_counts: Dict[str, int]
    edge_counts: Dict[str, int]
    endpoints: Dict[str, Tuple[str, str]]
    mean_degree: Dict[str, float]
    max_degree: Dict[str, int]
    features: Dict[str, List[str]]
    labels: Dict[str, str]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node_types": {
                name: {"count": count, "features": self.features.get(name, []), "label": self.labels.get(name)}
                for name, count in self.node_counts.items()
            },
            "edge_types": {
                name: {
                    "source": self.endpoints[name][0],
                    "destination": self.endpoints[name][1],
                    "count": count,
                    "mean_out_degree": self.mean_degree[name],
                    "max_out_degree": self.max_degree[name],
                }
                for name, count in self.edge_counts.items()
            },
            "totals": {
                "node_types": len(self.node_counts),
                "edge_types": len(self.edge_counts),
                "nodes": sum(self.node_counts.values()),
                "edges": sum(self.edge_counts.values()),
            },
        }

    def to_text(self) -> str:
        lines = [f"Node types: {len(self.node_counts)} ({sum(self.node_counts.values())} nodes)"]
        for name, count in self.node_counts.items():
            features = ", ".join(self.features.get(name, [])) or "none"
            label = f", label {self.labels[name]}" if name in self.labels else ""
            lines.append(f"  {name}: {count} nodes, features: {features}{label}")
        lines.append(f"Edge types: {len(self.edge_counts)} ({sum(self.edge_counts.values())} edges)")
        for name, count in self.edge_counts.items():
            source, destination = self.endpoints[name]
            lines.append(f"  {name}: {source} -> {destination}, {count} edges, "
                         f"mean out-degree {self.mean_degree[name]:.3f}, max {self.max_degree[name]}")
        return "\n".join(lines)


def graph_summary(graph: HeteroGraph) -> GraphSummary:
    """Counts, degree statistics and feature inventory, sorted by type name"""
    node_counts = {name: graph.node_types[name].count for name in sorted(graph.node_types)}
    features = {name: sorted(graph.node_types[name].features) for name in node_counts}
    labels = {name: graph.node_types[name].label_column for name in node_counts
              if graph.node_types[name].label_column}

    edge_counts, endpoints, mean_degree, max_degree = {}, {}, {}, {}
    for name in sorted(graph.edge_types):
        edge = graph.edge_types[name]
        edge_counts[name] = edge.count
        endpoints[name] = (edge.source, edge.destination)
        sources = graph.node_types[edge.source].count
        degrees = np.bincount(edge.src, minlength=sources) if sources else np.zeros(0, dtype=np.int64)
        mean_degree[name] = float(edge.count / sources) if sources else 0.0
        max_degree[name] = int(degrees.max()) if len(degrees) else 0

    return GraphSummary(node_counts, edge_counts, endpoints, mean_degree, max_degree, features, labels)


def _column_cells(values: list) -> list:
    return [v.tolist() if isinstance(v, np.ndarray) else v for v in values]


def export_graph(graph: HeteroGraph, out_dir: str, storage=None) -> str:
    """Write one parquet file per node and edge type plus manifest.json; returns the manifest path"""
    os.makedirs(os.path.join(out_dir, "nodes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "edges"), exist_ok=True)
    manifest: Dict[str, Any] = {"node_types": {}, "edge_types": {}}

    for name in sorted(graph.node_types):
        node = graph.node_types[name]
        columns = {"node_id": np.arange(node.count, dtype=np.int64)}
        columns.update({c: pd.Series(_column_cells(v), dtype=object) for c, v in node.features.items()})
        if node.labels is not None:
            columns["label"] = pd.Series(node.labels, dtype=object)
        if node.timestamps is not None:
            columns["timestamp"] = pd.to_datetime(pd.Series(node.timestamps), errors="coerce")
        relative = os.path.join("nodes", f"{name}.pqt")
        pd.DataFrame(columns).to_parquet(os.path.join(out_dir, relative), engine="pyarrow", index=False)
        if storage is not None:
            storage.track(os.path.join(out_dir, relative))
        manifest["node_types"][name] = {
            "count": node.count,
            "file": relative,
            "features": sorted(node.features),
            "label_column": node.label_column,
            "has_timestamps": node.timestamps is not None,
        }

    for name in sorted(graph.edge_types):
        edge = graph.edge_types[name]
        columns = {"src": edge.src, "dst": edge.dst}
        columns.update({c: pd.Series(_column_cells(v), dtype=object) for c, v in edge.features.items()})
        if edge.timestamps is not None:
            columns["timestamp"] = pd.to_datetime(pd.Series(edge.timestamps), errors="coerce")
        relative = os.path.join("edges", f"{name}.pqt")
        pd.DataFrame(columns).to_parquet(os.path.join(out_dir, relative), engine="pyarrow", index=False)
        if storage is not None:
            storage.track(os.path.join(out_dir, relative))
        manifest["edge_types"][name] = {
            "source": edge.source,
            "destination": edge.destination,
            "count": edge.count,
            "file": relative,
            "features": sorted(edge.features),
        }

    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    if storage is not None:
        storage.track(path)
    return path
