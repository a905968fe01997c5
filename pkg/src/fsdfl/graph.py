"""Communication topologies and the graph operators built from them.

Every topology is an undirected connected graph over devices 0..n-1.
The derived operators (degree, adjacency, Laplacian, incidence and the
row-stochastic neighbor-averaging matrix) are dense numpy arrays; entries
are integers or exact reciprocals, so the algebraic identities between
them hold exactly in 64-bit floating point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TopologyError(ValueError):
    """Raised for infeasible or malformed topology requests."""


def _normalize_edges(edges) -> frozenset[tuple[int, int]]:
    out = set()
    for i, j in edges:
        if i == j:
            raise TopologyError(f"self-loop at node {i}")
        out.add((min(i, j), max(i, j)))
    return frozenset(out)


@dataclass(frozen=True)
class Topology:
    """Undirected connected communication graph."""

    n: int
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "edges", _normalize_edges(self.edges))
        if self.n < 2:
            raise TopologyError(f"need at least 2 nodes, got {self.n}")
        for i, j in self.edges:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise TopologyError(f"edge ({i},{j}) out of range for n={self.n}")
        if not self._connected():
            raise TopologyError("graph is not connected")

    def _connected(self) -> bool:
        adj = self.neighbor_sets()
        seen = {0}
        frontier = [0]
        while frontier:
            u = frontier.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    frontier.append(v)
        return len(seen) == self.n

    def neighbor_sets(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def degrees(self) -> list[int]:
        return [len(s) for s in self.neighbor_sets()]

    def directed_edges(self) -> list[tuple[int, int]]:
        """Both orientations of every edge, sorted lexicographically.

        This fixed column order makes B (and hence d = B^T y) reproducible.
        """
        out = []
        for i, j in self.edges:
            out.append((i, j))
            out.append((j, i))
        return sorted(out)

    def to_edge_list(self) -> str:
        lines = [f"n={self.n}"]
        lines += [f"{i} {j}" for i, j in sorted(self.edges)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list(cls, text: str) -> "Topology":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("n="):
            raise TopologyError("edge list must start with 'n=<N>' header")
        n = int(lines[0][2:])
        edges = set()
        for ln in lines[1:]:
            i, j = ln.split()
            edges.add((int(i), int(j)))
        return cls(n=n, edges=frozenset(edges))


@dataclass(frozen=True)
class GraphOperators:
    """Dense matrix operators of a topology.

    degree D, adjacency A, laplacian L = D - A, incidence B (one column per
    directed edge, +1 at tail and -1 at head), neighbor_avg D^-1 A, and the
    edge coefficient matrix edge_coeff = B^T D^-1 B.
    """

    topology: Topology
    degree: np.ndarray
    adjacency: np.ndarray
    laplacian: np.ndarray
    incidence: np.ndarray
    neighbor_avg: np.ndarray
    edge_coeff: np.ndarray


def operators(t: Topology) -> GraphOperators:
    n = t.n
    A = np.zeros((n, n))
    for i, j in t.edges:
        A[i, j] = 1.0
        A[j, i] = 1.0
    D = np.diag(A.sum(axis=1))
    L = D - A
    dir_edges = t.directed_edges()
    B = np.zeros((n, len(dir_edges)))
    for col, (tail, head) in enumerate(dir_edges):
        B[tail, col] = 1.0
        B[head, col] = -1.0
    deg = np.diag(D)
    if np.any(deg == 0):
        raise TopologyError("isolated node (cannot build neighbor averaging)")
    Dinv = np.diag(1.0 / deg)
    return GraphOperators(
        topology=t,
        degree=D,
        adjacency=A,
        laplacian=L,
        incidence=B,
        neighbor_avg=Dinv @ A,
        edge_coeff=B.T @ Dinv @ B,
    )


def build_ring(n: int) -> Topology:
    if n < 3:
        raise TopologyError(f"ring needs n >= 3, got {n}")
    return Topology(n=n, edges=frozenset((i, (i + 1) % n) for i in range(n)))


def build_star(n: int) -> Topology:
    if n < 2:
        raise TopologyError(f"star needs n >= 2, got {n}")
    return Topology(n=n, edges=frozenset((0, i) for i in range(1, n)))


def build_random_connected(n: int, edge_count: int, seed: int,
                           max_tries: int = 10_000) -> Topology:
    """Uniform edge sets, rejection-sampled until connected."""
    if n < 2:
        raise TopologyError(f"need n >= 2, got {n}")
    max_edges = n * (n - 1) // 2
    if edge_count < n - 1 or edge_count > max_edges:
        raise TopologyError(
            f"edge_count={edge_count} infeasible for n={n} "
            f"(need {n - 1} <= edge_count <= {max_edges})")
    all_edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        idx = rng.choice(len(all_edges), size=edge_count, replace=False)
        edges = frozenset(all_edges[k] for k in idx)
        try:
            return Topology(n=n, edges=edges)
        except TopologyError:
            continue
    raise TopologyError(
        f"no connected graph found in {max_tries} tries "
        f"(n={n}, edge_count={edge_count}, seed={seed})")
