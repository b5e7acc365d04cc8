"""Network topologies: synthetic generator families and empirical edge lists.

All generators are pure functions of (spec, seed) and return dense weighted
adjacency matrices with the convention A[l, j] = influence or flow from node
j to node l.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

import numpy as np

from .errors import DataFormatError, ParameterError

TOPOLOGY_KINDS = (
    "grid",
    "random",
    "power_law",
    "small_world",
    "community",
    "complete",
    "empirical",
)


@dataclass(frozen=True)
class Topology:
    """A weighted, possibly directed graph on n nodes.

    adjacency[l, j] > 0 means node j influences node l.  Generated graphs
    carry unit weights and no self-loops; empirical graphs keep whatever the
    edge list contains.
    """

    n: int
    adjacency: np.ndarray
    directed: bool
    kind: str

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.float64)
        if self.n < 1:
            raise ParameterError(f"node count must be >= 1, got {self.n}")
        if adj.shape != (self.n, self.n):
            raise ParameterError(
                f"adjacency shape {adj.shape} does not match n={self.n}"
            )
        if np.any(adj < 0):
            raise ParameterError("adjacency weights must be nonnegative")
        if self.kind != "empirical" and np.any(np.diag(adj) != 0):
            raise ParameterError("self-loops are only allowed for empirical graphs")
        if not self.directed and not np.array_equal(adj, adj.T):
            raise ParameterError("undirected topology requires symmetric adjacency")
        adj.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)

    @property
    def num_edges(self) -> int:
        """Number of stored edges (undirected pairs counted once)."""
        count = int(np.count_nonzero(self.adjacency))
        if not self.directed:
            loops = int(np.count_nonzero(np.diag(self.adjacency)))
            count = (count - loops) // 2 + loops
        return count

    def edge_list(self) -> list[tuple[int, int, float]]:
        """Edges as (src, dst, weight), src->dst meaning A[dst, src] = weight."""
        edges = []
        rows, cols = np.nonzero(self.adjacency)
        for l, j in zip(rows.tolist(), cols.tolist()):
            if not self.directed and j > l:
                continue
            edges.append((j, l, float(self.adjacency[l, j])))
        return edges


@dataclass(frozen=True)
class TopologySpec:
    """Parameters for one synthetic topology family.

    n is the node count for every kind except grid, which takes rows x cols.
    Kind-specific knobs default to values that keep 100-200 node graphs
    mostly connected.
    """

    kind: str
    n: int = 0
    rows: int = 0
    cols: int = 0
    edge_prob: float = 0.04          # random (Erdos-Renyi)
    attach_count: int = 2            # power_law (preferential attachment)
    ring_neighbors: int = 4          # small_world ring lattice degree
    rewire_prob: float = 0.1         # small_world
    p_in: float = 0.2                # community, within-block edge prob
    p_out: float = 0.01              # community, across-block edge prob

    def node_count(self) -> int:
        if self.kind == "grid":
            return self.rows * self.cols
        return self.n


def generate_topology(spec: TopologySpec, seed: int) -> Topology:
    """Build a synthetic topology; identical (spec, seed) gives identical output."""
    if spec.kind not in TOPOLOGY_KINDS or spec.kind == "empirical":
        raise ParameterError(f"unknown generator kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    if spec.kind == "grid":
        if spec.rows < 1 or spec.cols < 1:
            raise ParameterError("grid requires rows >= 1 and cols >= 1")
        adj = _grid(spec.rows, spec.cols)
    elif spec.kind == "complete":
        _require_n(spec)
        adj = np.ones((spec.n, spec.n)) - np.eye(spec.n)
    elif spec.kind == "random":
        _require_n(spec)
        if not 0.0 <= spec.edge_prob <= 1.0:
            raise ParameterError("edge_prob must be in [0, 1]")
        adj = _erdos_renyi(spec.n, spec.edge_prob, rng)
    elif spec.kind == "power_law":
        _require_n(spec)
        if spec.attach_count < 1:
            raise ParameterError("attach_count must be >= 1")
        if spec.attach_count >= spec.n:
            raise ParameterError("attach_count must be < n")
        adj = _preferential_attachment(spec.n, spec.attach_count, rng)
    elif spec.kind == "small_world":
        _require_n(spec)
        if spec.ring_neighbors >= spec.n:
            raise ParameterError("small-world neighbor count must be < n")
        if spec.ring_neighbors < 2 or spec.ring_neighbors % 2 != 0:
            raise ParameterError("ring_neighbors must be a positive even number")
        if not 0.0 <= spec.rewire_prob <= 1.0:
            raise ParameterError("rewire_prob must be in [0, 1]")
        adj = _small_world(spec.n, spec.ring_neighbors, spec.rewire_prob, rng)
    else:  # community
        _require_n(spec)
        for p in (spec.p_in, spec.p_out):
            if not 0.0 <= p <= 1.0:
                raise ParameterError("block edge probabilities must be in [0, 1]")
        adj = _planted_partition(spec.n, spec.p_in, spec.p_out, rng)
    return Topology(n=adj.shape[0], adjacency=adj, directed=False, kind=spec.kind)


def _require_n(spec: TopologySpec):
    if spec.n < 1:
        raise ParameterError(f"{spec.kind} requires n >= 1")


def _grid(rows: int, cols: int) -> np.ndarray:
    n = rows * cols
    adj = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                adj[i, i + 1] = adj[i + 1, i] = 1.0
            if r + 1 < rows:
                adj[i, i + cols] = adj[i + cols, i] = 1.0
    return adj


def _erdos_renyi(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    draws = rng.random((n, n))
    upper = np.triu(draws < p, k=1)
    adj = np.zeros((n, n))
    adj[upper] = 1.0
    return adj + adj.T


def _preferential_attachment(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    # Grow from an m-node empty seed set; each new node attaches m edges to
    # distinct targets chosen proportionally to degree.
    adj = np.zeros((n, n))
    targets = list(range(m))
    repeated: list[int] = []
    for source in range(m, n):
        for t in targets:
            adj[source, t] = adj[t, source] = 1.0
        repeated.extend(targets)
        repeated.extend([source] * m)
        chosen: set[int] = set()
        while len(chosen) < m:
            chosen.add(repeated[rng.integers(0, len(repeated))])
        targets = sorted(chosen)
    return adj


def _small_world(n: int, k: int, p: float, rng: np.random.Generator) -> np.ndarray:
    adj = np.zeros((n, n))
    for i in range(n):
        for off in range(1, k // 2 + 1):
            j = (i + off) % n
            adj[i, j] = adj[j, i] = 1.0
    for i in range(n):
        for off in range(1, k // 2 + 1):
            j = (i + off) % n
            if adj[i, j] == 0.0:
                continue
            if rng.random() < p:
                candidates = np.nonzero(adj[i] == 0)[0]
                candidates = candidates[candidates != i]
                if candidates.size == 0:
                    continue
                new_j = int(candidates[rng.integers(0, candidates.size)])
                adj[i, j] = adj[j, i] = 0.0
                adj[i, new_j] = adj[new_j, i] = 1.0
    return adj


def _planted_partition(n: int, p_in: float, p_out: float, rng: np.random.Generator) -> np.ndarray:
    block = np.zeros(n, dtype=int)
    block[n // 2:] = 1
    draws = rng.random((n, n))
    same = block[:, None] == block[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(draws < prob, k=1)
    adj = np.zeros((n, n))
    adj[upper] = 1.0
    return adj + adj.T


def in_degree(topology: Topology, l: int) -> int:
    """Unweighted count of nodes that influence node l."""
    if not 0 <= l < topology.n:
        raise ParameterError(f"node index {l} out of range for n={topology.n}")
    return int(np.count_nonzero(topology.adjacency[l]))


def in_degrees(topology: Topology) -> np.ndarray:
    """Unweighted in-degree of every node."""
    return np.count_nonzero(topology.adjacency, axis=1)


def load_edge_list(source: TextIO | Iterable[str], directed: bool = False,
                   weighted: bool = True) -> Topology:
    """Parse "src dst [weight]" lines into an empirical Topology.

    Node ids are 0-based integers; "#"-prefixed lines and blank lines are
    skipped; a missing weight defaults to 1.0; when undirected, each edge is
    mirrored.
    """
    edges: list[tuple[int, int, float]] = []
    max_node = -1
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise DataFormatError(f"line {lineno}: expected 'src dst [weight]', got {line!r}")
        try:
            src, dst = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataFormatError(f"line {lineno}: node ids must be integers, got {line!r}")
        if src < 0 or dst < 0:
            raise DataFormatError(f"line {lineno}: node ids must be nonnegative")
        weight = 1.0
        if len(parts) == 3:
            if not weighted:
                raise DataFormatError(f"line {lineno}: weight given but weighted=False")
            try:
                weight = float(parts[2])
            except ValueError:
                raise DataFormatError(f"line {lineno}: weight must be a number, got {parts[2]!r}")
            if weight < 0:
                raise ParameterError(f"line {lineno}: negative weight {weight}")
        edges.append((src, dst, weight))
        max_node = max(max_node, src, dst)
    n = max_node + 1
    if n < 1:
        raise DataFormatError("edge list contains no edges")
    adj = np.zeros((n, n))
    for src, dst, weight in edges:
        adj[dst, src] = weight
        if not directed:
            adj[src, dst] = weight
    return Topology(n=n, adjacency=adj, directed=directed, kind="empirical")


def dump_edge_list(topology: Topology, sink: Optional[TextIO] = None) -> str:
    """Serialize edges as "src dst weight" lines (round-trips load_edge_list)."""
    out = sink or io.StringIO()
    for src, dst, weight in topology.edge_list():
        out.write(f"{src} {dst} {weight!r}\n")
    return out.getvalue() if sink is None else ""
