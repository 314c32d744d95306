"""Namespace-scoped directed weighted graph over object URIs.

The graph is a derived index: every edge is also persisted as a relation tag
on its source object's record, so the whole structure can be rebuilt from
sidecars. Nodes are canonical URI strings; any endpoint of an edge is a node,
plus explicitly registered ones.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from . import errors
from .errors import RdosError

OUT = "OUT"
IN = "IN"
BOTH = "BOTH"

DEFAULT_DAMPING = 0.85
DEFAULT_TOLERANCE = 1e-9
DEFAULT_MAX_ITERS = 200


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    label: str
    weight: float


@dataclass(frozen=True)
class Visit:
    node: str
    depth: int
    path_weight: float


class RelationGraph:
    """Adjacency-list graph for one (tenant, namespace) scope."""

    def __init__(self, tenant: str, namespace: str):
        self.tenant = tenant
        self.namespace = namespace
        self.nodes: set[str] = set()
        # source -> (label, target) -> weight, and the reverse direction.
        self.out: dict[str, dict[tuple[str, str], float]] = {}
        self.inc: dict[str, dict[tuple[str, str], float]] = {}

    def _scope_prefix(self) -> str:
        return f"rdos://{self.tenant}/{self.namespace}/"

    def register(self, node: str) -> None:
        self.nodes.add(node)

    def upsert_edge(self, source: str, target: str, label: str = "RelTo",
                    weight: float = 1.0) -> Edge:
        """Insert the edge or update its weight; one edge per (source, target, label)."""
        if source == target:
            raise RdosError(errors.SELF_LOOP, f"{source} -> itself")
        if not (0.0 <= weight <= 1.0):
            raise RdosError(errors.WEIGHT_OUT_OF_RANGE, f"weight {weight} outside [0, 1]")
        prefix = self._scope_prefix()
        for uri in (source, target):
            if not uri.startswith(prefix):
                raise RdosError(errors.CROSS_NAMESPACE,
                                f"{uri} not in {self.tenant}/{self.namespace}")
        self.nodes.add(source)
        self.nodes.add(target)
        self.out.setdefault(source, {})[(label, target)] = weight
        self.inc.setdefault(target, {})[(label, source)] = weight
        return Edge(source, target, label, weight)

    def remove_edge(self, source: str, target: str, label: str) -> None:
        self.out.get(source, {}).pop((label, target), None)
        self.inc.get(target, {}).pop((label, source), None)

    def drop_out_edges(self, source: str) -> None:
        """Remove every edge originating at ``source`` (object tombstoned)."""
        for (label, target) in list(self.out.get(source, {})):
            self.remove_edge(source, target, label)

    def prune(self, node: str) -> None:
        """Forget a node once nothing is incident to it."""
        if not self.out.get(node) and not self.inc.get(node):
            self.nodes.discard(node)
            self.out.pop(node, None)
            self.inc.pop(node, None)

    def edge_count(self) -> int:
        return sum(len(edges) for edges in self.out.values())

    def neighbors(self, node: str, direction: str = OUT, label: str | None = None) -> list[Edge]:
        """Incident edges, ordered by (label, other endpoint). Unknown node -> []."""
        out_edges: list[Edge] = []
        in_edges: list[Edge] = []
        if direction in (OUT, BOTH):
            for (lab, target), weight in self.out.get(node, {}).items():
                if label is None or lab == label:
                    out_edges.append(Edge(node, target, lab, weight))
        if direction in (IN, BOTH):
            for (lab, source), weight in self.inc.get(node, {}).items():
                if label is None or lab == label:
                    in_edges.append(Edge(source, node, lab, weight))
        out_edges.sort(key=lambda e: (e.label, e.target))
        in_edges.sort(key=lambda e: (e.label, e.source))
        if direction == OUT:
            return out_edges
        if direction == IN:
            return in_edges
        merged = {(e.source, e.target, e.label): e for e in out_edges + in_edges}
        return sorted(merged.values(),
                      key=lambda e: (e.label, e.target if e.source == node else e.source))

    def traverse(self, start: str, max_depth: int, direction: str = OUT,
                 min_weight: float | None = None, label: str | None = None) -> list[Visit]:
        """Breadth-first expansion along edges passing the filters.

        Each reachable node is reported once, at its first (shallowest)
        discovery; path weight is the product of edge weights along that
        discovery path. Expansion order is deterministic: neighbors are
        visited in (label, endpoint) order. The start node is excluded.
        """
        if max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        found: dict[str, Visit] = {}
        queue: deque[tuple[str, int, float]] = deque([(start, 0, 1.0)])
        seen = {start}
        while queue:
            node, depth, weight_in = queue.popleft()
            if depth == max_depth:
                continue
            for edge in self.neighbors(node, direction, label):
                other = edge.target if edge.target != node else edge.source
                if min_weight is not None and edge.weight < min_weight:
                    continue
                if other in seen:
                    continue
                seen.add(other)
                visit = Visit(other, depth + 1, weight_in * edge.weight)
                found[other] = visit
                queue.append((other, depth + 1, visit.path_weight))
        return sorted(found.values(), key=lambda v: v.node)

    def pagerank(self, damping: float = DEFAULT_DAMPING,
                 tolerance: float = DEFAULT_TOLERANCE,
                 max_iters: int = DEFAULT_MAX_ITERS) -> dict[str, float]:
        """Power iteration over the weight-normalized out-edge matrix.

        Each out-edge contributes weight / total-out-weight of its source;
        nodes with no (or zero-weight) out-edges distribute uniformly.
        Iterates until the L1 change drops below ``tolerance``.
        """
        nodes = sorted(self.nodes)
        if not nodes:
            raise RdosError(errors.EMPTY_GRAPH, "pagerank needs at least one node")
        n = len(nodes)
        out_total = {u: sum(self.out.get(u, {}).values()) for u in nodes}
        scores = {u: 1.0 / n for u in nodes}
        for _ in range(max_iters):
            dangling = sum(scores[u] for u in nodes if out_total[u] == 0.0)
            nxt = {v: (1.0 - damping) / n + damping * dangling / n for v in nodes}
            for u in nodes:
                total = out_total[u]
                if total == 0.0:
                    continue
                share = damping * scores[u] / total
                for (_label, v), weight in self.out[u].items():
                    nxt[v] += share * weight
            delta = sum(abs(nxt[u] - scores[u]) for u in nodes)
            scores = nxt
            if delta < tolerance:
                break
        return scores
