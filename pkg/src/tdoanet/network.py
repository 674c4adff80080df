"""Sensor-network topology and structural observability analysis.

Edges are stored as ordered pairs ``(j, i)`` meaning *i receives from j*
(``j`` is an in-neighbour of ``i``). Self-weights live in the fusion matrix,
never in the edge set.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import networkx as nx
import numpy as np

from tdoanet.errors import ConfigError
from tdoanet.matlib import kron

Edge = tuple[int, int]


@dataclass(frozen=True)
class Digraph:
    n: int
    edges: frozenset[Edge] = field(default_factory=frozenset)

    def __post_init__(self):
        edges = frozenset((int(j), int(i)) for j, i in self.edges)
        for j, i in edges:
            if j == i:
                raise ConfigError(f"self-loop ({j}, {i}) not allowed in the edge set")
            if not (0 <= j < self.n and 0 <= i < self.n):
                raise ConfigError(f"edge ({j}, {i}) out of range for n={self.n}")
        object.__setattr__(self, "edges", edges)

    def in_neighbors(self, i: int) -> list[int]:
        return sorted(j for j, k in self.edges if k == i)

    def out_neighbors(self, j: int) -> list[int]:
        return sorted(i for k, i in self.edges if k == j)

    def neighbor_lists(self) -> list[list[int]]:
        return [self.in_neighbors(i) for i in range(self.n)]

    def successors(self) -> list[list[int]]:
        succ: list[list[int]] = [[] for _ in range(self.n)]
        for j, i in sorted(self.edges):
            succ[j].append(i)
        return succ

    def without(self, removed: Iterable[Edge]) -> "Digraph":
        return Digraph(self.n, self.edges - frozenset(removed))

    def with_edges(self, added: Iterable[Edge]) -> "Digraph":
        return Digraph(self.n, self.edges | frozenset(added))

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g


def ring(n: int) -> Digraph:
    """Bidirectional cycle 0-1-...-(n-1)-0."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    edges = set()
    for i in range(n):
        j = (i + 1) % n
        if j != i:
            edges |= {(i, j), (j, i)}
    return Digraph(n, frozenset(edges))


def directed_cycle(n: int) -> Digraph:
    return Digraph(n, frozenset((i, (i + 1) % n) for i in range(n) if n > 1))


def line(n: int) -> Digraph:
    edges = set()
    for i in range(n - 1):
        edges |= {(i, i + 1), (i + 1, i)}
    return Digraph(n, frozenset(edges))


def complete(n: int) -> Digraph:
    return Digraph(n, frozenset((j, i) for j in range(n) for i in range(n) if i != j))


def random_geometric(positions, radius: float) -> Digraph:
    """Bidirectional links between sensors closer than ``radius``, plus a ring
    over the sensor indices so the result is always strongly connected."""
    P = np.asarray(positions, dtype=float)
    n = P.shape[0]
    edges = set(ring(n).edges)
    for i, j in itertools.combinations(range(n), 2):
        if np.linalg.norm(P[i] - P[j]) <= radius:
            edges |= {(i, j), (j, i)}
    return Digraph(n, frozenset(edges))


# --------------------------------------------------------------------------
# strongly connected components


@dataclass(frozen=True)
class SccDecomposition:
    components: list[tuple[int, ...]]  # in reverse topological order
    component_of: list[int]
    dag_edges: frozenset[Edge]  # between component ids

    @property
    def parents(self) -> list[int]:
        """Component ids with no outgoing link to another component."""
        has_out = {a for a, _ in self.dag_edges}
        return [c for c in range(len(self.components)) if c not in has_out]


def scc_decompose(g: Digraph) -> SccDecomposition:
    """Tarjan's algorithm (iterative, so deep graphs do not hit the recursion limit)."""
    succ = g.successors()
    index = [-1] * g.n
    low = [0] * g.n
    on_stack = [False] * g.n
    stack: list[int] = []
    components: list[tuple[int, ...]] = []
    counter = 0
    for root in range(g.n):
        if index[root] >= 0:
            continue
        work = [(root, 0)]
        while work:
            v, pos = work.pop()
            if pos == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack[v] = True
            recurse = False
            for k in range(pos, len(succ[v])):
                w = succ[v][k]
                if index[w] < 0:
                    work.append((v, k + 1))
                    work.append((w, 0))
                    recurse = True
                    break
                if on_stack[w]:
                    low[v] = min(low[v], index[w])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.append(w)
                    if w == v:
                        break
                components.append(tuple(sorted(comp)))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
    component_of = [0] * g.n
    for c, comp in enumerate(components):
        for v in comp:
            component_of[v] = c
    dag = frozenset(
        (component_of[j], component_of[i]) for j, i in g.edges if component_of[j] != component_of[i]
    )
    return SccDecomposition(components, component_of, dag)


def is_strongly_connected(g: Digraph) -> bool:
    return len(scc_decompose(g).components) == 1


def edge_connectivity(g: Digraph) -> int:
    """Largest q such that the graph stays strongly connected after removing
    any q edges (the directed edge connectivity minus one)."""
    if not is_strongly_connected(g):
        raise ConfigError("edge_connectivity requires a strongly connected graph")
    if g.n == 1:
        return 0
    return nx.edge_connectivity(g.to_networkx()) - 1


def node_connectivity(g: Digraph) -> int:
    """Largest q such that removing any q nodes leaves a strongly connected
    graph. Uses the usual convention that the complete graph on n nodes has
    connectivity n - 1."""
    if not is_strongly_connected(g):
        raise ConfigError("node_connectivity requires a strongly connected graph")
    if g.n == 1:
        return 0
    return nx.node_connectivity(g.to_networkx()) - 1


# --------------------------------------------------------------------------
# fusion weights


@dataclass(frozen=True)
class ConsensusMatrix:
    W: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ConfigError("W must be square")
        if not np.all(np.isfinite(W)) or np.any(W < 0):
            raise ConfigError("W must be finite and nonnegative")
        if np.max(np.abs(W.sum(axis=1) - 1.0)) > 1e-12:
            raise ConfigError("W must be row-stochastic")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def graph(self) -> Digraph:
        return Digraph(
            self.n,
            frozenset((j, i) for i in range(self.n) for j in range(self.n) if i != j and self.W[i, j] > 0),
        )


def build_row_stochastic(g: Digraph, rng: np.random.Generator) -> ConsensusMatrix:
    """Uniform (0, 1] weights on the self-loop and every in-link, rows normalized."""
    W = np.zeros((g.n, g.n))
    for i in range(g.n):
        for j in [i, *g.in_neighbors(i)]:
            W[i, j] = 1.0 - rng.random()
    W /= W.sum(axis=1, keepdims=True)
    return ConsensusMatrix(W)


def remove_link_and_repair(
    cm: ConsensusMatrix, g: Digraph, link: Edge, bidirectional: bool = True
) -> tuple[ConsensusMatrix, Digraph]:
    """Drop ``link`` (and its reverse if ``bidirectional``), folding each
    removed weight into the receiver's self-weight so W stays row-stochastic."""
    removed = [tuple(link)] + ([tuple(link)[::-1]] if bidirectional else [])
    W = cm.W.copy()
    for j, i in removed:
        if (j, i) not in g.edges:
            raise ConfigError(f"link ({j}, {i}) not present")
        W[i, i] += W[i, j]
        W[i, j] = 0.0
    return ConsensusMatrix(W), g.without(removed)


def restore_link(
    cm: ConsensusMatrix, g: Digraph, link: Edge, weights: Sequence[float]
) -> tuple[ConsensusMatrix, Digraph]:
    """Inverse of :func:`remove_link_and_repair`: ``weights`` are the original
    ``W[i, j]`` (and ``W[j, i]``) values, taken back out of the diagonal."""
    j, i = link
    added = [(j, i), (i, j)][: len(weights)]
    W = cm.W.copy()
    for (a, b), w in zip(added, weights):
        W[b, b] -= w
        W[b, a] = w
    return ConsensusMatrix(W), g.with_edges(added)


@dataclass(frozen=True)
class DelayMap:
    taus: dict  # (j, i) -> integer delay on the link j -> i

    def __post_init__(self):
        taus = {(int(j), int(i)): int(t) for (j, i), t in dict(self.taus).items()}
        if any(t < 0 for t in taus.values()):
            raise ConfigError("delays must be >= 0")
        object.__setattr__(self, "taus", taus)

    @property
    def tau_bar(self) -> int:
        return max(self.taus.values(), default=0)

    def get(self, j: int, i: int) -> int:
        return self.taus.get((j, i), 0)

    @classmethod
    def zero(cls, g: Digraph) -> "DelayMap":
        return cls({e: 0 for e in g.edges})

    @classmethod
    def random(cls, g: Digraph, tau_max: int, rng: np.random.Generator) -> "DelayMap":
        """Independent uniform integer delays in ``[0, tau_max]`` per link."""
        if tau_max < 0:
            raise ConfigError("tau_max must be >= 0")
        edges = sorted(g.edges)
        draws = rng.integers(0, tau_max + 1, size=len(edges))
        return cls({e: int(t) for e, t in zip(edges, draws)})


# --------------------------------------------------------------------------
# structural observability


def structure(A, tol: float = 0.0) -> np.ndarray:
    return np.abs(np.asarray(A, dtype=float)) > tol


def generic_rank(pattern) -> int:
    """Maximum bipartite matching between rows and columns over nonzero entries
    (augmenting paths)."""
    P = np.asarray(pattern, dtype=bool)
    rows, cols = P.shape
    adj = [list(np.flatnonzero(P[r])) for r in range(rows)]
    match_col = [-1] * cols

    def augment(r, seen):
        for c in adj[r]:
            if seen[c]:
                continue
            seen[c] = True
            if match_col[c] < 0 or augment(match_col[c], seen):
                match_col[c] = r
                return True
        return False

    return sum(augment(r, [False] * cols) for r in range(rows))


def system_digraph(A) -> Digraph:
    """State digraph of ``x+ = A x``: edge ``j -> i`` whenever ``A[i, j] != 0``
    (self-loops dropped)."""
    P = structure(A)
    n = P.shape[0]
    return Digraph(n, frozenset((j, i) for i in range(n) for j in range(n) if i != j and P[i, j]))


def parent_components(A) -> list[tuple[int, ...]]:
    scc = scc_decompose(system_digraph(A))
    return [scc.components[c] for c in scc.parents]


def measurement_structure(mm) -> list[set[int]]:
    """Generic state indices each sensor's output rows touch.

    Relative sensor positions are nonzero for almost all geometries, so a
    sensor with at least one neighbour measures all three position states.
    """
    return [set(range(3)) if h.shape[0] > 0 else set() for h in mm.H]


def observability_matrix(A, C) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    blocks, M = [], C
    for _ in range(A.shape[0]):
        blocks.append(M)
        M = M @ A
    return np.vstack(blocks)


def numerical_rank(M, rel_tol: float = 1e-8) -> int:
    s = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


@dataclass(frozen=True)
class ObservabilityVerdict:
    observable_structural: bool
    full_generic_rank: bool
    parents_measured: bool
    strongly_connected: bool
    numerical_rank: Optional[int] = None
    dimension: Optional[int] = None

    @property
    def numerically_observable(self) -> Optional[bool]:
        if self.numerical_rank is None:
            return None
        return self.numerical_rank == self.dimension


def check_distributed_observability(
    g: Digraph,
    model,
    measured: Optional[Sequence[Iterable[int]]] = None,
    cm: Optional[ConsensusMatrix] = None,
    mm=None,
    rank_tol: float = 1e-8,
) -> ObservabilityVerdict:
    """Structural test of observability of ``(W kron F, D_H)`` plus an
    optional numerical witness.

    ``measured[i]`` lists the state indices sensor i's outputs touch; it
    defaults to the generic pattern of ``mm``. When both ``cm`` and ``mm`` are
    given, the rank of the full observability matrix is reported as well.
    """
    F = model.F
    N = F.shape[0]
    if measured is None:
        if mm is None:
            raise ConfigError("need either a measurement structure or a measurement model")
        measured = measurement_structure(mm)
    measured = [set(int(s) for s in m) for m in measured]
    if len(measured) != g.n:
        raise ConfigError(f"measurement structure has {len(measured)} entries, graph has {g.n} nodes")
    if any(not 0 <= s < N for m in measured for s in m):
        raise ConfigError("measured state index out of range")
    if cm is not None and cm.n != g.n:
        raise ConfigError("W size does not match the graph")
    if mm is not None and (mm.n != g.n or mm.N != N):
        raise ConfigError("measurement model does not match graph/model")

    full_rank = generic_rank(structure(F)) == N
    union = set().union(*measured)
    parents_ok = all(union & set(comp) for comp in parent_components(F))
    sc = is_strongly_connected(g)
    verdict = dict(
        observable_structural=bool(full_rank and parents_ok and sc),
        full_generic_rank=full_rank,
        parents_measured=parents_ok,
        strongly_connected=sc,
    )
    if cm is not None and mm is not None:
        A = kron(cm.W, F)
        O = observability_matrix(A, mm.D_H())
        verdict.update(numerical_rank=numerical_rank(O, rank_tol), dimension=g.n * N)
    return ObservabilityVerdict(**verdict)
