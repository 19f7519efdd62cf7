"""Exact metric graphs: parsing, validation, geodesics and wave horizons.

A metric graph is a finite set of vertices (boundary or interior) joined by
edges of positive rational length.  Boundary vertices have valence 1,
interior vertices valence >= 3; interior vertices of valence 2 are rejected
on input because they are metrically indistinguishable from a point inside
an edge.  Edges may be loops or parallel; each edge carries its own
coordinate running from `tail` (offset 0) to `head` (offset = length).

Unbounded edges are encoded as finite edges of length T + 1 with the
`unbounded` marker; with horizon T the waves never reach the synthetic far
end, so the truncation is invisible to every downstream stage.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

from .rational import fmt_ratio, merge_intervals, parse_ratio


class GraphError(ValueError):
    """Invalid graph description; carries (line, message) diagnostics."""

    def __init__(self, violations):
        self.violations = list(violations)
        text = "; ".join(f"line {ln}: {msg}" if ln else msg for ln, msg in self.violations)
        super().__init__(text)


@dataclass(frozen=True)
class Vertex:
    id: str
    boundary: bool


@dataclass(frozen=True)
class Edge:
    id: str
    tail: str
    head: str
    length: Fraction
    unbounded: bool = False


@dataclass(frozen=True)
class GraphPoint:
    """A point of the graph: a vertex, or an interior point of an edge.

    Offsets 0 and `length` are canonicalized to vertex references, so
    equality of GraphPoints is genuine equality of points.
    """

    vertex: Optional[str] = None
    edge: Optional[str] = None
    offset: Optional[Fraction] = None

    def is_vertex(self) -> bool:
        return self.vertex is not None

    def sort_key(self):
        if self.vertex is not None:
            return (0, self.vertex, Fraction(0))
        return (1, self.edge, self.offset)

    def __repr__(self):
        if self.vertex is not None:
            return f"<{self.vertex}>"
        return f"<{self.edge}@{fmt_ratio(self.offset)}>"


class MetricGraph:
    """Validated metric graph with an adjacency index.

    Pure value semantics: nothing here mutates after construction.
    """

    def __init__(self, vertices: Iterable[Vertex], edges: Iterable[Edge]):
        self.vertices: dict[str, Vertex] = {}
        self.edges: dict[str, Edge] = {}
        for v in vertices:
            if v.id in self.vertices:
                raise GraphError([(None, f"duplicate vertex id {v.id!r}")])
            self.vertices[v.id] = v
        for e in edges:
            if e.id in self.edges:
                raise GraphError([(None, f"duplicate edge id {e.id!r}")])
            self.edges[e.id] = e
        # branches[v] = list of (edge_id, end) with end in {"tail", "head"};
        # loops contribute two branches, so valence counts them twice.
        self.branches: dict[str, list[tuple[str, str]]] = {v: [] for v in self.vertices}
        for e in self.edges.values():
            for end, vid in (("tail", e.tail), ("head", e.head)):
                if vid not in self.vertices:
                    raise GraphError([(None, f"edge {e.id!r} references unknown vertex {vid!r}")])
                self.branches[vid].append((e.id, end))
        self._edge_index = {eid: i for i, eid in enumerate(self.edges)}
        self.validate()

    # -- structure ---------------------------------------------------------

    def valence(self, vid: str) -> int:
        return len(self.branches[vid])

    def boundary_vertices(self) -> list[str]:
        return [v.id for v in self.vertices.values() if v.boundary]

    def edge_index(self, eid: str) -> int:
        return self._edge_index[eid]

    def opposite(self, eid: str, end: str) -> str:
        e = self.edges[eid]
        return e.head if end == "tail" else e.tail

    def end_vertex(self, eid: str, end: str) -> str:
        e = self.edges[eid]
        return e.tail if end == "tail" else e.head

    def validate(self):
        violations = []
        if not self.vertices:
            violations.append((None, "empty graph"))
        for v in self.vertices.values():
            d = self.valence(v.id)
            if v.boundary and d != 1:
                violations.append((None, f"boundary vertex {v.id!r} has valence {d}, expected 1"))
            if not v.boundary and d == 2:
                violations.append((None, f"valence-2 interior vertex {v.id!r}"))
            if not v.boundary and d < 2:
                violations.append((None, f"interior vertex {v.id!r} has valence {d}, expected >= 3"))
        for e in self.edges.values():
            if e.length <= 0:
                violations.append((None, f"edge {e.id!r} has non-positive length"))
        if self.vertices and not any(v.boundary for v in self.vertices.values()):
            violations.append((None, "graph has no boundary vertex"))
        if self.vertices:
            seen = {next(iter(self.vertices))}
            stack = list(seen)
            while stack:
                v = stack.pop()
                for eid, end in self.branches[v]:
                    w = self.opposite(eid, end)
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
            if len(seen) != len(self.vertices):
                violations.append((None, "disconnected graph"))
        if violations:
            raise GraphError(violations)

    # -- points ------------------------------------------------------------

    def point(self, edge_id: str, offset) -> GraphPoint:
        """Canonical point on an edge; endpoint offsets collapse to vertices."""
        off = Fraction(offset)
        e = self.edges[edge_id]
        if off < 0 or off > e.length:
            raise ValueError(f"offset {off} outside edge {edge_id!r} of length {e.length}")
        if off == 0:
            return GraphPoint(vertex=e.tail)
        if off == e.length:
            return GraphPoint(vertex=e.head)
        return GraphPoint(edge=edge_id, offset=off)

    def vertex_point(self, vid: str) -> GraphPoint:
        if vid not in self.vertices:
            raise ValueError(f"unknown vertex {vid!r}")
        return GraphPoint(vertex=vid)

    # -- metric ------------------------------------------------------------

    def _dijkstra(self, seeds: dict[str, Fraction]) -> dict[str, Fraction]:
        dist: dict[str, Fraction] = {}
        counter = 0
        heap = []
        for v, d in seeds.items():
            heapq.heappush(heap, (d, counter, v))
            counter += 1
        while heap:
            d, _, v = heapq.heappop(heap)
            if v in dist:
                continue
            dist[v] = d
            for eid, end in self.branches[v]:
                w = self.opposite(eid, end)
                nd = d + self.edges[eid].length
                if w not in dist:
                    heapq.heappush(heap, (nd, counter, w))
                    counter += 1
        return dist

    def vertex_distances(self, sources: Iterable[str]) -> dict[str, Fraction]:
        return self._dijkstra({v: Fraction(0) for v in sources})

    def _point_seeds(self, p: GraphPoint) -> dict[str, Fraction]:
        if p.is_vertex():
            return {p.vertex: Fraction(0)}
        e = self.edges[p.edge]
        seeds: dict[str, Fraction] = {}
        for vid, d in ((e.tail, p.offset), (e.head, e.length - p.offset)):
            if vid not in seeds or d < seeds[vid]:
                seeds[vid] = d
        return seeds

    def distance(self, x: GraphPoint, y: GraphPoint) -> Fraction:
        """Exact geodesic distance between two points."""
        best = None
        if not x.is_vertex() and not y.is_vertex() and x.edge == y.edge:
            best = abs(x.offset - y.offset)
        dist = self._dijkstra(self._point_seeds(x))
        for vid, tail_d in self._point_seeds(y).items():
            cand = dist[vid] + tail_d
            if best is None or cand < best:
                best = cand
        return best


@dataclass(frozen=True)
class ControlConfig:
    """Controlled boundary vertices and the wave horizon."""

    sigma: tuple[str, ...]
    horizon: Fraction

    def validate(self, g: MetricGraph):
        if not self.sigma:
            raise GraphError([(None, "empty control set")])
        for vid in self.sigma:
            if vid not in g.vertices or not g.vertices[vid].boundary:
                raise GraphError([(None, f"control vertex {vid!r} is not a boundary vertex")])
        if self.horizon <= 0:
            raise GraphError([(None, "horizon must be positive")])

    def filling_time(self, g: MetricGraph, gamma: str) -> Fraction:
        """Time needed for waves from `gamma` to cover the whole graph."""
        dist = g.vertex_distances([gamma])
        return max(dist[v] for v in g.boundary_vertices())


@dataclass
class Ball:
    """The closed metric neighborhood of Sigma of radius T, edge by edge.

    `segments[eid]` is a sorted list of disjoint closed intervals in edge
    coordinates; whole edges appear as a single [0, length] interval.
    """

    segments: dict[str, list[tuple[Fraction, Fraction]]] = field(default_factory=dict)

    def covered_length(self) -> Fraction:
        total = Fraction(0)
        for ivs in self.segments.values():
            for lo, hi in ivs:
                total += hi - lo
        return total

    def contains_interval(self, eid: str, lo: Fraction, hi: Fraction) -> bool:
        return any(a <= lo and hi <= b for a, b in self.segments.get(eid, []))

    def __eq__(self, other):
        return isinstance(other, Ball) and self.segments == other.segments

    def issubset(self, other: "Ball") -> bool:
        return all(
            other.contains_interval(eid, lo, hi)
            for eid, ivs in self.segments.items()
            for lo, hi in ivs
        )


def metric_ball(g: MetricGraph, sigma: Iterable[str], T) -> Ball:
    """Closed set of points within distance T of the control set."""
    T = Fraction(T)
    dist = g.vertex_distances(sigma)
    ball = Ball()
    for e in g.edges.values():
        ivs = []
        da, db = dist.get(e.tail), dist.get(e.head)
        if da is not None and da < T:
            ivs.append((Fraction(0), min(e.length, T - da)))
        if db is not None and db < T:
            ivs.append((max(Fraction(0), e.length - (T - db)), e.length))
        if da is not None and da == T:
            ivs.append((Fraction(0), Fraction(0)))
        if db is not None and db == T:
            ivs.append((e.length, e.length))
        merged = merge_intervals(ivs)
        merged = [(lo, hi) for lo, hi in merged if hi > lo]
        if merged:
            ball.segments[e.id] = merged
    return ball


# -- text format -------------------------------------------------------------
#
#   vertex <id> boundary|interior
#   edge <id> <v1> <v2> <p>/<q>|<int>|inf        (inf: v2 is the synthetic far end)
#   sigma <id> [<id> ...]
#   horizon <p>/<q>
#
# Comments start with '#'.  Rationals are always `p/q` or integer literals.


@dataclass
class ParsedInput:
    graph: MetricGraph
    sigma: tuple[str, ...]
    horizon: Optional[Fraction]

    def control(self) -> ControlConfig:
        if self.horizon is None:
            raise GraphError([(None, "missing horizon")])
        if not self.sigma:
            raise GraphError([(None, "missing sigma")])
        cfg = ControlConfig(self.sigma, self.horizon)
        cfg.validate(self.graph)
        return cfg


def parse_graph(text: str) -> ParsedInput:
    vertices: list[Vertex] = []
    edge_rows: list[tuple[int, str, str, str, str]] = []
    sigma: list[str] = []
    horizon: Optional[Fraction] = None
    violations = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "vertex":
                if len(parts) != 3 or parts[2] not in ("boundary", "interior"):
                    raise ValueError("expected: vertex <id> boundary|interior")
                vertices.append(Vertex(parts[1], parts[2] == "boundary"))
            elif kind == "edge":
                if len(parts) != 5:
                    raise ValueError("expected: edge <id> <v1> <v2> <length>")
                edge_rows.append((ln, parts[1], parts[2], parts[3], parts[4]))
            elif kind == "sigma":
                if len(parts) < 2:
                    raise ValueError("expected: sigma <id> ...")
                sigma.extend(parts[1:])
            elif kind == "horizon":
                if len(parts) != 2:
                    raise ValueError("expected: horizon <p>/<q>")
                horizon = parse_ratio(parts[1])
            else:
                raise ValueError(f"unknown directive {kind!r}")
        except ValueError as exc:
            violations.append((ln, str(exc)))
    edges = []
    for ln, eid, v1, v2, length_text in edge_rows:
        if length_text == "inf":
            if horizon is None:
                violations.append((ln, "infinite edge requires a horizon line"))
                continue
            edges.append(Edge(eid, v1, v2, horizon + 1, unbounded=True))
        else:
            try:
                edges.append(Edge(eid, v1, v2, parse_ratio(length_text)))
            except ValueError:
                violations.append((ln, f"bad length {length_text!r}"))
    if violations:
        raise GraphError(violations)
    try:
        graph = MetricGraph(vertices, edges)
    except GraphError as exc:
        raise GraphError(exc.violations) from None
    for vid in sigma:
        if vid not in graph.vertices or not graph.vertices[vid].boundary:
            raise GraphError([(None, f"sigma vertex {vid!r} is not a boundary vertex")])
    for e in graph.edges.values():
        if e.unbounded and (graph.vertices[e.head].boundary is False or e.head in sigma):
            raise GraphError([(None, f"far end of unbounded edge {e.id!r} must be an uncontrolled boundary vertex")])
    return ParsedInput(graph, tuple(sigma), horizon)


def serialize_graph(parsed: ParsedInput) -> str:
    """Canonical text rendering; parse(serialize(x)) == x."""
    g = parsed.graph
    lines = []
    for v in g.vertices.values():
        lines.append(f"vertex {v.id} {'boundary' if v.boundary else 'interior'}")
    for e in g.edges.values():
        length = "inf" if e.unbounded else fmt_ratio(e.length)
        lines.append(f"edge {e.id} {e.tail} {e.head} {length}")
    if parsed.sigma:
        lines.append("sigma " + " ".join(parsed.sigma))
    if parsed.horizon is not None:
        lines.append(f"horizon {fmt_ratio(parsed.horizon)}")
    return "\n".join(lines) + "\n"
