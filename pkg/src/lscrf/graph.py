"""Graphs, labelings, energy tables and the closed-form tree estimator.

Conventions shared by the whole package:

* labels are integers ``0 .. r-1``;
* edges are stored as ``(s, t)`` with ``s < t`` and pairwise tables are
  indexed ``[label of s, label of t]``;
* ``P(y) ∝ exp(-E(y))``: a more probable configuration has lower energy.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

#: Finite stand-in for an infinite energy (log of a zero probability).
ENERGY_CAP = 1e6

#: Largest state space the enumeration routines will visit.
ENUMERATION_LIMIT = 2 ** 20

DEFAULT_SMOOTHING = 1e-9


class GraphError(ValueError):
    pass


class EnumerationError(ValueError):
    """The requested labeling space is too large to enumerate."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph on nodes ``0 .. m-1``.

    ``edges`` is an ``(n_edges, 2)`` integer array in canonical orientation.
    Use :meth:`from_edges` to build one from arbitrary pairs.
    """

    m: int
    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if self.m < 0:
            raise GraphError("node count must be non-negative")
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.m:
                raise GraphError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise GraphError("self-loops are not allowed")
            if np.any(edges[:, 0] > edges[:, 1]):
                raise GraphError("edges must be stored with s < t")
            keys = edges[:, 0] * self.m + edges[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise GraphError("duplicate edge")

    @classmethod
    def from_edges(cls, m: int, pairs) -> "Graph":
        """Build a graph, flipping pairs into ``s < t`` order."""
        e = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return cls(m, np.sort(e, axis=1))

    @classmethod
    def chain(cls, m: int) -> "Graph":
        return cls(m, np.stack([np.arange(m - 1), np.arange(1, m)], axis=1))

    @classmethod
    def grid(cls, h: int, w: int) -> "Graph":
        """4-connected ``h x w`` grid, nodes numbered row-major."""
        idx = np.arange(h * w).reshape(h, w)
        right = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
        down = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
        e = np.concatenate([right, down])
        order = np.lexsort((e[:, 1], e[:, 0]))
        return cls(h * w, e[order])

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.m)

    @cached_property
    def isolated(self) -> np.ndarray:
        """Boolean mask of nodes without incident edges."""
        return self.degree == 0

    @cached_property
    def incident(self) -> list[list[tuple[int, int, bool]]]:
        """Per node, a list of ``(edge, neighbour, node_is_first)``."""
        inc: list[list[tuple[int, int, bool]]] = [[] for _ in range(self.m)]
        for e, (s, t) in enumerate(self.edges.tolist()):
            inc[s].append((e, t, True))
            inc[t].append((e, s, False))
        return inc

    @cached_property
    def rooted(self) -> "RootedForest":
        """BFS rooting of every component at its smallest node.

        Raises :class:`GraphError` if the graph has a cycle.
        """
        return _root_forest(self)

    def __eq__(self, other):
        return (isinstance(other, Graph) and self.m == other.m
                and np.array_equal(self.edges, other.edges))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RootedForest:
    """Parent pointers of a forest, grouped by depth.

    ``child_first[c]`` says whether ``c`` is the first endpoint of the edge
    joining it to its parent.
    """

    parent: np.ndarray
    parent_edge: np.ndarray
    child_first: np.ndarray
    roots: np.ndarray
    levels: tuple


def _root_forest(graph: Graph) -> RootedForest:
    m = graph.m
    parent = [-1] * m
    parent_edge = [-1] * m
    child_first = [False] * m
    depth = [-1] * m
    inc = graph.incident
    roots = []
    for root in range(m):
        if depth[root] >= 0:
            continue
        roots.append(root)
        depth[root] = 0
        frontier = [root]
        while frontier:
            nxt = []
            for u in frontier:
                pe = parent_edge[u]
                du = depth[u] + 1
                for e, v, u_first in inc[u]:
                    if e == pe:
                        continue
                    if depth[v] >= 0:
                        raise GraphError("graph has a cycle")
                    depth[v] = du
                    parent[v] = u
                    parent_edge[v] = e
                    child_first[v] = not u_first
                    nxt.append(v)
            frontier = nxt
    depth_a = np.asarray(depth, dtype=np.int64)
    n_levels = int(depth_a.max()) + 1 if m else 0
    order = np.argsort(depth_a, kind="stable")
    bounds = np.searchsorted(depth_a[order], np.arange(n_levels + 1))
    levels = tuple(order[bounds[d]:bounds[d + 1]] for d in range(n_levels))
    return RootedForest(np.asarray(parent, dtype=np.int64),
                        np.asarray(parent_edge, dtype=np.int64),
                        np.asarray(child_first, dtype=bool),
                        np.asarray(roots, dtype=np.int64), levels)


def is_tree(graph: Graph) -> bool:
    """True iff the graph is acyclic (a forest)."""
    parent = list(range(graph.m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for s, t in graph.edges.tolist():
        a, b = find(s), find(t)
        if a == b:
            return False
        parent[a] = b
    return True


def disjoint_union(graphs: Sequence[Graph]) -> tuple[Graph, np.ndarray, np.ndarray]:
    """Stack graphs into one. Returns the union and node/edge offsets."""
    node_off = np.zeros(len(graphs) + 1, dtype=np.int64)
    edge_off = np.zeros(len(graphs) + 1, dtype=np.int64)
    for i, g in enumerate(graphs):
        node_off[i + 1] = node_off[i] + g.m
        edge_off[i + 1] = edge_off[i] + g.n_edges
    if graphs:
        edges = np.concatenate([g.edges + node_off[i] for i, g in enumerate(graphs)])
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    return Graph(int(node_off[-1]), edges), node_off, edge_off


def check_labeling(y, m: int, r: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (m,):
        raise ValueError(f"labeling has shape {y.shape}, expected ({m},)")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if m and (y.min() < 0 or y.max() >= r):
        raise ValueError(f"label out of range [0, {r})")
    return y


@dataclass(frozen=True, eq=False)
class Instance:
    """One attributed graph, optionally with its ground-truth labeling."""

    graph: Graph
    node_features: np.ndarray
    edge_features: np.ndarray
    labels: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        nf = np.asarray(self.node_features, dtype=np.float64)
        ef = np.asarray(self.edge_features, dtype=np.float64)
        if nf.ndim == 1 and self.graph.m == 0:
            nf = nf.reshape(0, 0)
        if ef.ndim == 1 and self.graph.n_edges == 0:
            ef = ef.reshape(0, 0)
        if nf.ndim != 2 or len(nf) != self.graph.m:
            raise ValueError("need one node feature vector per node")
        if ef.ndim != 2 or len(ef) != self.graph.n_edges:
            raise ValueError("need one edge feature vector per edge")
        object.__setattr__(self, "node_features", nf)
        object.__setattr__(self, "edge_features", ef)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (self.graph.m,):
                raise ValueError("labels must have one entry per node")
            if self.graph.m and y.min() < 0:
                raise ValueError("negative label")
            object.__setattr__(self, "labels", y)

    @property
    def node_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.edge_features.shape[1]


@dataclass(frozen=True, eq=False)
class MarginalTables:
    unary: np.ndarray      # (m, r)
    pairwise: np.ndarray   # (n_edges, r, r)

    @property
    def r(self) -> int:
        return self.unary.shape[1]

    def max_abs_diff(self, other: "MarginalTables") -> float:
        d = np.abs(self.unary - other.unary).max(initial=0.0)
        return float(max(d, np.abs(self.pairwise - other.pairwise).max(initial=0.0)))


@dataclass(frozen=True, eq=False)
class EnergyFunction:
    """Unary and pairwise energy tables over a fixed graph."""

    graph: Graph
    unary: np.ndarray      # (m, r)
    pairwise: np.ndarray   # (n_edges, r, r)

    def __post_init__(self):
        u = np.asarray(self.unary, dtype=np.float64)
        p = np.asarray(self.pairwise, dtype=np.float64)
        m, ne = self.graph.m, self.graph.n_edges
        if u.ndim != 2 or u.shape[0] != m:
            raise ValueError(f"unary table must be ({m}, r), got {u.shape}")
        r = u.shape[1]
        if p.shape != (ne, r, r):
            raise ValueError(f"pairwise table must be ({ne}, {r}, {r}), got {p.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(p))):
            raise ValueError("energy tables must be finite (use ENERGY_CAP)")
        object.__setattr__(self, "unary", u)
        object.__setattr__(self, "pairwise", p)

    @property
    def r(self) -> int:
        return self.unary.shape[1]

    @property
    def m(self) -> int:
        return self.graph.m

    @classmethod
    def zeros(cls, graph: Graph, r: int) -> "EnergyFunction":
        return cls(graph, np.zeros((graph.m, r)), np.zeros((graph.n_edges, r, r)))


def empirical_marginals(samples, graph: Graph, r: int) -> MarginalTables:
    """Unary and pairwise label frequencies over a set of labelings."""
    Y = np.asarray(samples)
    if Y.size == 0 and (Y.ndim < 2 or len(Y) == 0):
        raise ValueError("need at least one sample")
    Y = Y.reshape(len(Y), graph.m)
    if not np.issubdtype(Y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if Y.size and (Y.min() < 0 or Y.max() >= r):
        raise ValueError(f"label out of range [0, {r})")
    T = len(Y)
    unary = np.zeros((graph.m, r))
    for s in range(graph.m):
        unary[s] = np.bincount(Y[:, s], minlength=r)
    pairwise = np.zeros((graph.n_edges, r, r))
    for e, (s, t) in enumerate(graph.edges.tolist()):
        pairwise[e] = np.bincount(Y[:, s] * r + Y[:, t], minlength=r * r).reshape(r, r)
    return MarginalTables(unary / T, pairwise / T)


def tree_ml_params(marginals: MarginalTables, graph: Graph,
                   smoothing: float = DEFAULT_SMOOTHING,
                   tol: float = 1e-8) -> EnergyFunction:
    """Maximum-likelihood energy of a tree model from its marginals.

    ``theta_s = -log mu_s`` and ``theta_st = -log(mu_st / (mu_s mu_t))``.
    Marginals are floored at ``smoothing`` before taking logs. With
    ``smoothing=0`` impossible states get :data:`ENERGY_CAP`, and the
    pairwise entries of an already impossible node label are left at 0.
    """
    if smoothing < 0:
        raise ValueError("smoothing must be non-negative")
    if not is_tree(graph):
        raise GraphError("closed-form estimate requires an acyclic graph")
    mu_s = np.asarray(marginals.unary, dtype=np.float64)
    mu_st = np.asarray(marginals.pairwise, dtype=np.float64)
    s, t = graph.edges[:, 0], graph.edges[:, 1]
    if len(s):
        bad = max(np.abs(mu_st.sum(axis=2) - mu_s[s]).max(),
                  np.abs(mu_st.sum(axis=1) - mu_s[t]).max())
        if bad > tol:
            raise ValueError(f"marginals are inconsistent (max violation {bad:.3g})")

    if smoothing > 0:
        u = np.maximum(mu_s, smoothing)
        p = np.maximum(mu_st, smoothing)
        unary = -np.log(u)
        pairwise = -np.log(p / (u[s][:, :, None] * u[t][:, None, :]))
        return EnergyFunction(graph, unary, pairwise)

    with np.errstate(divide="ignore", invalid="ignore"):
        unary = np.where(mu_s > 0, -np.log(mu_s), ENERGY_CAP)
        denom = mu_s[s][:, :, None] * mu_s[t][:, None, :]
        pairwise = np.where(mu_st > 0, -np.log(mu_st / denom), ENERGY_CAP)
        pairwise = np.where(denom > 0, pairwise, 0.0)
    return EnergyFunction(graph, unary, pairwise)


def energy_eval(energy: EnergyFunction, y) -> float:
    """Energy of one labeling."""
    y = check_labeling(y, energy.m, energy.r)
    e = energy.graph.edges
    total = energy.unary[np.arange(energy.m), y].sum()
    if len(e):
        total += energy.pairwise[np.arange(len(e)), y[e[:, 0]], y[e[:, 1]]].sum()
    return float(total)


def energy_eval_batch(energy: EnergyFunction, Y: np.ndarray) -> np.ndarray:
    """Energies of the rows of ``Y`` (shape ``(n, m)``)."""
    Y = np.asarray(Y, dtype=np.int64)
    out = energy.unary[np.arange(energy.m), Y].sum(axis=1)
    e = energy.graph.edges
    if len(e):
        out = out + energy.pairwise[np.arange(len(e)), Y[:, e[:, 0]], Y[:, e[:, 1]]].sum(axis=1)
    return out


def _check_enumerable(m: int, r: int) -> None:
    if m * np.log2(max(r, 1)) > np.log2(ENUMERATION_LIMIT) + 1e-9:
        raise EnumerationError(f"{r}^{m} labelings exceed the enumeration limit")


def enumerate_labelings(m: int, r: int, chunk: int = 1 << 16):
    """Yield all labelings in lexicographic order, in blocks of rows."""
    _check_enumerable(m, r)
    if m == 0:
        yield np.zeros((1, 0), dtype=np.int64)
        return
    total = r ** m
    powers = r ** np.arange(m - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        yield (idx[:, None] // powers[None, :]) % r


def exact_partition(energy: EnergyFunction) -> float:
    """``log sum_y exp(-E(y))`` by enumeration."""
    parts = [logsumexp(-energy_eval_batch(energy, Y))
             for Y in enumerate_labelings(energy.m, energy.r)]
    return float(logsumexp(parts))


def random_tree(m: int, rng: np.random.Generator) -> Graph:
    """Uniform random recursive tree: node i attaches to a node before it."""
    if m <= 1:
        return Graph(m, np.zeros((0, 2), dtype=np.int64))
    parents = np.array([rng.integers(0, i) for i in range(1, m)])
    return Graph.from_edges(m, np.stack([parents, np.arange(1, m)], axis=1))


def random_forest(m: int, rng: np.random.Generator, p_keep: float = 0.8) -> Graph:
    """Random tree with each edge dropped independently with prob ``1 - p_keep``."""
    g = random_tree(m, rng)
    keep = rng.random(g.n_edges) < p_keep
    return Graph(m, g.edges[keep])


__all__ = [
    "ENERGY_CAP", "ENUMERATION_LIMIT", "DEFAULT_SMOOTHING", "Graph", "GraphError",
    "RootedForest",
    "EnumerationError", "Instance", "MarginalTables", "EnergyFunction",
    "is_tree", "disjoint_union", "check_labeling", "empirical_marginals",
    "tree_ml_params", "energy_eval", "energy_eval_batch", "enumerate_labelings",
    "exact_partition", "random_tree", "random_forest",
]
