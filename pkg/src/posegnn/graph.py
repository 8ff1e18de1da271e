"""KNN similarity graphs over feature rows and the aggregation products on them."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, TextIO

import numpy as np

from . import kernels
from .numerics import ShapeError, as_matrix


class GraphParameterError(ValueError):
    pass


TRAIN = "train"
TEST = "test"


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph stored as sorted neighbor lists.

    Self-loops are never stored; the aggregation used by the spectral layer
    adds them implicitly.
    """

    n: int
    neighbors: tuple[tuple[int, ...], ...]
    node_features: np.ndarray | None = None

    def __post_init__(self):
        if len(self.neighbors) != self.n:
            raise GraphParameterError(f"expected {self.n} neighbor lists, got {len(self.neighbors)}")
        if self.node_features is not None and self.node_features.shape[0] != self.n:
            raise ShapeError(f"node_features has {self.node_features.shape[0]} rows for {self.n} nodes")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], node_features=None) -> "Graph":
        adj: list[set[int]] = [set() for _ in range(n)]
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise GraphParameterError(f"edge ({i}, {j}) out of range for {n} nodes")
            if i == j:
                continue
            adj[i].add(j)
            adj[j].add(i)
        return cls(n, tuple(tuple(sorted(s)) for s in adj), node_features)

    @cached_property
    def indptr(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(nb) for nb in self.neighbors])]).astype(np.int64)

    @cached_property
    def indices(self) -> np.ndarray:
        flat = [j for nb in self.neighbors for j in nb]
        return np.asarray(flat, dtype=np.int64)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nb in enumerate(self.neighbors) for j in nb if i < j]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self.n == other.n and self.neighbors == other.neighbors


def l2_distance(x_i, x_j) -> float:
    a = np.asarray(x_i, dtype=np.float64).reshape(-1)
    b = np.asarray(x_j, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.size} vs {b.size}")
    diff = a - b
    return float(np.sqrt(np.dot(diff, diff)))


def knn_select(features, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows for every row, nearest first.

    Ties at equal distance go to the lower row index.
    """
    x = np.ascontiguousarray(as_matrix(features, "features"))
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise GraphParameterError(f"k={k} out of range [1, {n - 1}] for {n} nodes")
    return kernels.knn_query(x, x, int(k), True)


def _symmetrize(n: int, selections: np.ndarray) -> tuple[tuple[int, ...], ...]:
    adj: list[set[int]] = [set() for _ in range(n)]
    for i, row in enumerate(selections.tolist()):
        for j in row:
            adj[i].add(j)
            adj[j].add(i)
    return tuple(tuple(sorted(s)) for s in adj)


def knn_graph(features, k: int) -> Graph:
    """Directed k-NN selections symmetrized by union."""
    x = np.ascontiguousarray(as_matrix(features, "features"))
    sel = knn_select(x, k)
    return Graph(x.shape[0], _symmetrize(x.shape[0], sel), x)


@dataclass(frozen=True)
class StitchedGraph:
    graph: Graph
    roles: tuple[str, ...]
    # original train row index for each node, -1 for test nodes
    source_rows: tuple[int, ...]

    @property
    def test_nodes(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == TEST]


def stitch_test_graph(train_features, test_features, k: int) -> StitchedGraph:
    """Inference graph of the test rows plus their k nearest train rows.

    Nodes are ordered test rows first, then the pulled-in train rows by
    ascending original index. Test rows connect only to train rows. Edges
    among the included train rows are rebuilt with the k-NN rule restricted
    to that set (k capped at its size minus one).
    """
    tr = np.ascontiguousarray(as_matrix(train_features, "train_features"))
    te = np.ascontiguousarray(as_matrix(test_features, "test_features"))
    if te.shape[0] == 0 or te.size == 0:
        raise GraphParameterError("empty test set")
    if tr.shape[1] != te.shape[1]:
        raise ShapeError(f"train dim {tr.shape[1]} != test dim {te.shape[1]}")
    n_train, n_test = tr.shape[0], te.shape[0]
    if not 1 <= k <= n_train:
        raise GraphParameterError(f"k={k} out of range [1, {n_train}] for {n_train} train rows")

    sel = kernels.knn_query(te, tr, int(k), False)
    included = sorted(set(sel.ravel().tolist()))
    local = {row: n_test + pos for pos, row in enumerate(included)}
    n = n_test + len(included)
    adj: list[set[int]] = [set() for _ in range(n)]
    for t, row in enumerate(sel.tolist()):
        for j in row:
            adj[t].add(local[j])
            adj[local[j]].add(t)

    m = len(included)
    if m >= 2:
        sub = np.ascontiguousarray(tr[included])
        sub_sel = kernels.knn_query(sub, sub, min(int(k), m - 1), True)
        for a, row in enumerate(sub_sel.tolist()):
            for b in row:
                adj[n_test + a].add(n_test + b)
                adj[n_test + b].add(n_test + a)

    feats = np.vstack([te, tr[included]]) if m else te
    graph = Graph(n, tuple(tuple(sorted(s)) for s in adj), feats)
    roles = (TEST,) * n_test + (TRAIN,) * m
    return StitchedGraph(graph, roles, (-1,) * n_test + tuple(included))


def feature_map_to_graph(feature_map, k: int) -> Graph:
    """Treat each spatial cell of an L x W x d map as a node and link by k-NN.

    Accepts the 3-D map or the already flattened (L*W) x d matrix.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim == 3:
        fm = fm.reshape(fm.shape[0] * fm.shape[1], fm.shape[2])
    x = as_matrix(fm, "feature_map")
    if x.shape[0] < 2:
        raise GraphParameterError("feature map needs at least 2 cells")
    return knn_graph(x, k)


def _check_rows(g: Graph, x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(as_matrix(x, "x"))
    if x.shape[0] != g.n:
        raise ShapeError(f"x has {x.shape[0]} rows for a {g.n}-node graph")
    return x


def normalized_aggregate(g: Graph, x) -> np.ndarray:
    """Symmetric-normalized propagation with self-loops, from neighbor lists.

    Row i is sum over j in N(i) + {i} of x_j / sqrt(deg_i * deg_j), where
    deg counts the self-loop.
    """
    x = _check_rows(g, x)
    return kernels.normalized_aggregate(g.indptr, g.indices, x)


def neighbor_sum(g: Graph, x) -> np.ndarray:
    """Row i is the plain sum of x_j over the stored neighbors of i."""
    x = _check_rows(g, x)
    return kernels.neighbor_sum(g.indptr, g.indices, x)


def write_edge_list(g: Graph, k: int, fh: TextIO) -> None:
    fh.write(f"{g.n} {k}\n")
    for i, j in g.edges():
        fh.write(f"{i} {j}\n")


def read_edge_list(fh: TextIO) -> tuple[Graph, int]:
    header = fh.readline().split()
    if len(header) != 2:
        raise GraphParameterError("edge list header must be 'n k'")
    n, k = int(header[0]), int(header[1])
    edges = []
    for lineno, line in enumerate(fh, start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise GraphParameterError(f"line {lineno}: expected 'i j'")
        edges.append((int(parts[0]), int(parts[1])))
    return Graph.from_edges(n, edges), k
