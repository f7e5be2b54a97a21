"""Synchronous message-passing network: topologies, per-round exchange, faults."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from pevccp.errors import TopologyError

MAX_DROP = 0.999


@dataclass(frozen=True)
class Graph:
    """Undirected graph on nodes ``0..node_count-1``."""

    node_count: int
    edges: frozenset[tuple[int, int]]
    kind: str = "custom"
    _neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.node_count < 1:
            raise TopologyError("graph needs at least one node")
        norm = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise TopologyError(f"self-loop at node {a}")
            if not (0 <= a < self.node_count and 0 <= b < self.node_count):
                raise TopologyError(f"edge ({a}, {b}) outside 0..{self.node_count - 1}")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(norm))
        nbrs: list[set[int]] = [set() for _ in range(self.node_count)]
        for a, b in norm:
            nbrs[a].add(b)
            nbrs[b].add(a)
        object.__setattr__(self, "_neighbors", tuple(tuple(sorted(n)) for n in nbrs))

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self._neighbors[v]

    def degree(self, v: int) -> int:
        return len(self._neighbors[v])

    @property
    def edge_list(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def is_connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            v = queue.popleft()
            for w in self._neighbors[v]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        return len(seen) == self.node_count

    def laplacian(self) -> np.ndarray:
        lap = np.zeros((self.node_count, self.node_count))
        for a, b in self.edges:
            lap[a, b] = lap[b, a] = -1.0
        lap[np.diag_indices_from(lap)] = -lap.sum(axis=1)
        return lap

    def spec(self) -> str:
        return self.kind


def make_topology(kind: str, v: int, seed: int = 0, extra_edge_prob: float = 0.2) -> Graph:
    """Connected graph of the requested kind.

    ``random_connected`` draws a random spanning tree and then adds each
    remaining edge with probability ``extra_edge_prob``.  A ring on fewer
    than three nodes degrades to a path (or a single node).
    """
    if v < 1:
        raise TopologyError(f"need at least one node, got {v}")
    if kind == "ring":
        if v <= 2:
            edges = {(0, 1)} if v == 2 else set()
        else:
            edges = {(i, (i + 1) % v) for i in range(v)}
        return Graph(v, frozenset(edges), kind="ring")
    if kind == "star":
        return Graph(v, frozenset((0, i) for i in range(1, v)), kind="star")
    if kind == "complete":
        return Graph(v, frozenset((i, j) for i in range(v) for j in range(i + 1, v)), kind="complete")
    if kind in ("random", "random_connected"):
        rng = np.random.default_rng(seed)
        order = rng.permutation(v)
        edges = set()
        for i in range(1, v):
            parent = order[int(rng.integers(0, i))]
            edges.add((int(min(order[i], parent)), int(max(order[i], parent))))
        for i in range(v):
            for j in range(i + 1, v):
                if (i, j) not in edges and rng.random() < extra_edge_prob:
                    edges.add((i, j))
        return Graph(v, frozenset(edges), kind=f"random:{seed}")
    raise TopologyError(f"unknown topology {kind!r}")


def parse_topology(spec: str, v: int) -> Graph:
    """Parse ``ring | star | complete | random:<seed>``."""
    if spec.startswith("random"):
        _, _, seed = spec.partition(":")
        return make_topology("random_connected", v, seed=int(seed or 0))
    return make_topology(spec, v)


@dataclass(frozen=True)
class FaultPlan:
    """Edge-level message loss and optional early halt.

    Each round every edge is dropped independently with probability
    ``drop_probability`` (values above ``MAX_DROP`` are lowered to it);
    a dropped edge loses both directions.  With ``stale_replay`` the
    receiver reuses the last value it got over that edge instead of
    omitting the neighbour.
    """

    drop_probability: float = 0.0
    halt_at_iteration: int | None = None
    rng_seed: int = 0
    stale_replay: bool = False

    def __post_init__(self):
        if not 0 <= self.drop_probability <= 1:
            raise ValueError(f"drop_probability must lie in [0, 1], got {self.drop_probability}")
        # total loss would stall consensus for good; keep a sliver of traffic
        object.__setattr__(self, "drop_probability", min(float(self.drop_probability), MAX_DROP))
        if self.halt_at_iteration is not None and self.halt_at_iteration < 1:
            raise ValueError("halt_at_iteration must be at least 1")

    def dropped_edges(self, graph: Graph, k: int) -> set[tuple[int, int]]:
        if self.drop_probability == 0:
            return set()
        # one stream per round keeps the draw independent of how many
        # rounds were simulated before it
        rng = np.random.default_rng([self.rng_seed, k])
        edges = graph.edge_list
        lost = rng.random(len(edges)) < self.drop_probability
        return {e for e, d in zip(edges, lost) if d}


@dataclass(frozen=True)
class NeighborMessage:
    sender: int
    lam: np.ndarray


class Network:
    """Per-run message exchange; owns the stale-value cache for replay."""

    def __init__(self, graph: Graph, faults: FaultPlan | None = None):
        self.graph = graph
        self.faults = faults or FaultPlan()
        self._last: dict[tuple[int, int], np.ndarray] = {}

    def exchange(self, outbound, k: int) -> list[list[NeighborMessage]]:
        return exchange(self.graph, outbound, self.faults, k, cache=self._last)


def exchange(graph: Graph, outbound, faults: FaultPlan | None, k: int,
             cache: dict | None = None) -> list[list[NeighborMessage]]:
    """Deliver each node's outbound vector to its neighbours for round ``k``."""
    if len(outbound) != graph.node_count:
        raise ValueError(f"need {graph.node_count} outbound vectors, got {len(outbound)}")
    faults = faults or FaultPlan()
    dropped = faults.dropped_edges(graph, k)
    inbox: list[list[NeighborMessage]] = [[] for _ in range(graph.node_count)]
    for v in range(graph.node_count):
        for w in graph.neighbors(v):
            edge = (min(v, w), max(v, w))
            if edge in dropped:
                if faults.stale_replay and cache is not None and (w, v) in cache:
                    inbox[v].append(NeighborMessage(w, cache[(w, v)]))
                continue
            msg = NeighborMessage(w, outbound[w])
            if cache is not None:
                cache[(w, v)] = outbound[w]
            inbox[v].append(msg)
    return inbox
