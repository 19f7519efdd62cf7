"""Frames: metric graphs extracted from the canonical forms.

The algebraic frame glues the spectra of the merged blocks by coordinate
overlap: every block contributes an interval of interior representation
points plus two boundary sets (clusters collapse to single frame points),
and two boundary points are identified when some source assigns them a
common coordinate value.  The geometric frame glues the merged families by
coincidence of their boundary determination sets in the graph.  Both carry
per-source coordinate functions of unit slope on the edges and coordinate
sets on the vertices.

Frame comparison follows the auxiliary-frame construction: suppress the
valence-2 vertices whose coordinate functions continue affinely, then match
vertices by exact coordinate sets and edges by length and coordinate
functions.  For ordinary inputs (identical nort and supp partitions) the
comparison must produce an isometry.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .canon_algebraic import CanonicalFormA, MergedBlock, boundary_reps
from .canon_geometric import GeometricForm, supp_partition
from .graph import GraphPoint
from .rational import fmt_ratio, parse_ratio
from .source_form import FormError, SourceParametricForm


@dataclass
class FrameVertex:
    id: str
    coords: dict[str, frozenset]
    members: tuple = ()  # constituent (edge ref, side) ends

    def coord_key(self, sigma):
        return tuple(tuple(sorted(self.coords.get(g, frozenset()))) for g in sigma)


@dataclass
class FrameEdge:
    id: str
    length: Fraction
    lo_vertex: str
    hi_vertex: str
    funcs: dict[str, tuple[tuple[int, Fraction], ...]]  # (slope, t0), tau = t0 + slope*r
    ref: int = -1  # block or family index

    def limit(self, gamma: str, at_hi: bool) -> frozenset:
        r = self.length if at_hi else Fraction(0)
        return frozenset(t0 + s * r for s, t0 in self.funcs.get(gamma, ()))

    def oriented_funcs(self, flipped: bool):
        if not flipped:
            return self.funcs
        return {g: tuple(sorted((-s, t0 + s * self.length) for s, t0 in fs))
                for g, fs in self.funcs.items()}


@dataclass
class FrameGraph:
    kind: str  # "algebraic" | "geometric"
    sigma: tuple[str, ...]
    vertices: list[FrameVertex]
    edges: list[FrameEdge]

    def vertex(self, vid: str) -> FrameVertex:
        return next(v for v in self.vertices if v.id == vid)

    def total_length(self) -> Fraction:
        return sum((e.length for e in self.edges), Fraction(0))

    def valence(self, vid: str) -> int:
        return sum((e.lo_vertex == vid) + (e.hi_vertex == vid) for e in self.edges)

    def interior_coords(self, edge_id: str, r: Fraction) -> dict[str, frozenset]:
        e = next(e for e in self.edges if e.id == edge_id)
        return {g: frozenset(t0 + s * r for s, t0 in fs)
                for g, fs in e.funcs.items()}

    def verify(self):
        if any(e.length <= 0 for e in self.edges):
            raise FormError("frame edge of non-positive length")
        for v in self.vertices:
            limits: dict[str, set] = {}
            for e in self.edges:
                for vid, at_hi in ((e.lo_vertex, False), (e.hi_vertex, True)):
                    if vid != v.id:
                        continue
                    for g in self.sigma:
                        limits.setdefault(g, set()).update(e.limit(g, at_hi))
            for g in self.sigma:
                if frozenset(limits.get(g, set())) != v.coords.get(g, frozenset()):
                    raise FormError(f"vertex {v.id} coordinates differ from edge limits")
        keys = [v.coord_key(self.sigma) for v in self.vertices]
        if len(set(keys)) != len(keys):
            raise FormError("frame vertex coordinates are not injective")


class _DSU:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra

    def classes(self):
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return [sorted(v) for v in sorted(out.values(), key=min)]


def _glue(ends: dict, overlaps) -> list[list]:
    dsu = _DSU(ends.keys())
    items = sorted(ends.keys())
    for i, a in enumerate(items):
        for b in items[i + 1:]:
            if overlaps(ends[a], ends[b]):
                dsu.union(a, b)
    return dsu.classes()


def _assemble(kind: str, sigma, ends: dict, classes, edge_rows) -> FrameGraph:
    vertex_of_end = {}
    vertices = []
    for i, cls in enumerate(classes):
        vid = f"w{i}"
        for end in cls:
            vertex_of_end[end] = vid
        vertices.append(FrameVertex(vid, {}, tuple(cls)))
    edges = []
    for ref, length, funcs in edge_rows:
        edges.append(FrameEdge(
            f"{'b' if kind == 'algebraic' else 'f'}{ref}", length,
            vertex_of_end[(ref, 0)], vertex_of_end[(ref, 1)], funcs, ref))
    frame = FrameGraph(kind, tuple(sigma), vertices, edges)
    for v in frame.vertices:
        coords: dict[str, set] = {g: set() for g in sigma}
        for e in frame.edges:
            for vid, at_hi in ((e.lo_vertex, False), (e.hi_vertex, True)):
                if vid == v.id:
                    for g in sigma:
                        coords[g].update(e.limit(g, at_hi))
        v.coords = {g: frozenset(vals) for g, vals in coords.items()}
    frame.verify()
    return frame


def build_frame_algebraic(canon: CanonicalFormA) -> FrameGraph:
    """Glue block-interval endpoints by coordinate overlap."""
    ends = {}
    edge_rows = []
    for i, block in enumerate(canon.blocks):
        for side, r in ((0, Fraction(0)), (1, block.eps)):
            ends[(i, side)] = {
                g: frozenset(t.tau(r) for t in block.terms.get(g, ()))
                for g in canon.sigma
            }
        funcs = {g: tuple(sorted((t.slope, t.t0) for t in ts))
                 for g, ts in block.terms.items()}
        edge_rows.append((i, block.eps, funcs))
    classes = _glue(ends, lambda a, b: any(a[g] & b[g] for g in canon.sigma))
    return _assemble("algebraic", canon.sigma, ends, classes, edge_rows)


def build_frame_geometric(geo: GeometricForm) -> FrameGraph:
    """Glue family boundaries by coincidence of determination sets."""
    ends = {}
    edge_rows = []
    for i, fam in enumerate(geo.families):
        for side in (0, 1):
            ends[(i, side)] = frozenset(fam.boundary_points(geo.graph, side))
        funcs = {g: tuple(sorted((t.slope, t.t0) for t in ts))
                 for g, ts in fam.terms.items()}
        edge_rows.append((i, fam.eps, funcs))
    classes = _glue(ends, lambda a, b: bool(a & b))
    return _assemble("geometric", geo.sigma, ends, classes, edge_rows)


# -- spectrum ------------------------------------------------------------------

@dataclass(frozen=True)
class SpectrumPoint:
    block: int
    position: tuple  # ("interior", r) | ("boundary", side, cluster_index)


@dataclass
class AlgebraicSpectrum:
    canon: CanonicalFormA
    boundary_points: list[SpectrumPoint]

    def coords(self, pt: SpectrumPoint) -> dict[str, frozenset]:
        block = self.canon.blocks[pt.block]
        if pt.position[0] == "interior":
            r = pt.position[1]
        else:
            r = Fraction(0) if pt.position[1] == "-" else block.eps
        return {g: frozenset(t.tau(r) for t in block.terms.get(g, ()))
                for g in self.canon.sigma}

    def interior_point(self, block: int, r) -> SpectrumPoint:
        blk = self.canon.blocks[block]
        r = Fraction(r)
        if not 0 < r < blk.eps:
            raise FormError("interior spectrum point needs 0 < r < eps")
        return SpectrumPoint(block, ("interior", r))


def spectrum_of(canon: CanonicalFormA) -> AlgebraicSpectrum:
    """Boundary spectrum points, one per cluster component, per block end."""
    points = []
    for i, block in enumerate(canon.blocks):
        for side in ("-", "+"):
            end = block.ends[side]
            for k in range(max(1, len(end.component_sizes))):
                points.append(SpectrumPoint(i, ("boundary", side, k)))
    return AlgebraicSpectrum(canon, points)


# -- ordinariness --------------------------------------------------------------

@dataclass
class OrdinaryVerdict:
    ordinary: bool
    family_index: Optional[int] = None
    nort_classes: Optional[list] = None
    supp_classes: Optional[list] = None

    def __bool__(self):
        return self.ordinary


def check_ordinary(form: SourceParametricForm) -> OrdinaryVerdict:
    """True iff the nort and supp partitions coincide on every family."""
    from .canon_algebraic import nort_partition
    for fam in form.families:
        nort = [set(c.members) for c in nort_partition(form, fam.index)]
        supp = [set(c.members) for c in supp_partition(form, fam.index)]
        key = lambda classes: sorted(tuple(sorted(c)) for c in classes)
        if key(nort) != key(supp):
            return OrdinaryVerdict(False, fam.index, key(nort), key(supp))
    return OrdinaryVerdict(True)


# -- valence-2 suppression and isometry ---------------------------------------

@dataclass
class _WorkEdge:
    length: Fraction
    lo: str
    hi: str
    funcs: dict
    parts: list  # [(original edge id, flipped, length)]


def _work_edges(frame: FrameGraph) -> dict[str, _WorkEdge]:
    return {
        e.id: _WorkEdge(e.length, e.lo_vertex, e.hi_vertex, dict(e.funcs),
                        [(e.id, False, e.length)])
        for e in frame.edges
    }


def _flip_work(w: _WorkEdge) -> _WorkEdge:
    funcs = {g: tuple(sorted((-s, t0 + s * w.length) for s, t0 in fs))
             for g, fs in w.funcs.items()}
    return _WorkEdge(w.length, w.hi, w.lo, funcs,
                     [(eid, not fl, ln) for eid, fl, ln in reversed(w.parts)])


def _smooth_concat(sigma, a: _WorkEdge, b: _WorkEdge) -> Optional[_WorkEdge]:
    """Concatenate a (ending at w) with b (starting at w) if every source's
    coordinate functions continue affinely across w."""
    funcs = {}
    for g in sigma:
        fa = set(a.funcs.get(g, ()))
        shifted = set((s, t0 - s * a.length) for s, t0 in b.funcs.get(g, ()))
        if fa != shifted:
            return None
        funcs[g] = tuple(sorted(fa))
    funcs = {g: fs for g, fs in funcs.items() if fs}
    return _WorkEdge(a.length + b.length, a.lo, b.hi, funcs, a.parts + b.parts)


def _suppress(frame: FrameGraph) -> dict[str, _WorkEdge]:
    work = _work_edges(frame)
    changed = True
    while changed:
        changed = False
        incidence: dict[str, list[tuple[str, str]]] = {}
        for eid, w in work.items():
            incidence.setdefault(w.lo, []).append((eid, "lo"))
            incidence.setdefault(w.hi, []).append((eid, "hi"))
        for vid, ends in incidence.items():
            if len(ends) != 2:
                continue
            (e1, side1), (e2, side2) = ends
            if e1 == e2:
                continue  # circle component; keep one vertex
            a = work[e1] if side1 == "hi" else _flip_work(work[e1])
            b = work[e2] if side2 == "lo" else _flip_work(work[e2])
            merged = _smooth_concat(frame.sigma, a, b)
            if merged is None:
                continue
            del work[e1], work[e2]
            work[f"{e1}+{e2}"] = merged
            changed = True
            break
    return work


@dataclass
class FrameIsometry:
    """Affine identification of one frame with another.

    edge_maps[eid] lists (other edge id, r_lo, r_hi, offset, direction):
    parameters [r_lo, r_hi] of edge eid map to the other edge starting at
    `offset` with the given direction.  vertex_map sends vertices to
    vertices or to interior points (edge id, offset) of the target frame.
    """

    edge_maps: dict[str, list[tuple[str, Fraction, Fraction, Fraction, int]]]
    vertex_map: dict[str, tuple]


def _match_reduced(sigma, wa: dict[str, _WorkEdge], wb: dict[str, _WorkEdge]):
    """Match reduced frames by coordinates; returns edge pairing or None."""
    def vertex_coords(work):
        coords: dict[str, dict] = {}
        for w in work.values():
            for vid, at_hi in ((w.lo, False), (w.hi, True)):
                r = w.length if at_hi else Fraction(0)
                entry = coords.setdefault(vid, {g: set() for g in sigma})
                for g in sigma:
                    entry[g].update(t0 + s * r for s, t0 in w.funcs.get(g, ()))
        return {vid: tuple(tuple(sorted(vals[g])) for g in sigma)
                for vid, vals in coords.items()}

    ca, cb = vertex_coords(wa), vertex_coords(wb)
    if len(ca) != len(cb):
        return None
    if len(set(ca.values())) != len(ca) or len(set(cb.values())) != len(cb):
        return None
    by_key = {key: vid for vid, key in cb.items()}
    vmap = {}
    for vid, key in ca.items():
        if key not in by_key:
            return None
        vmap[vid] = by_key[key]
    used = set()
    pairing = {}
    for eid, w in sorted(wa.items()):
        found = None
        for fid, x in sorted(wb.items()):
            if fid in used or x.length != w.length:
                continue
            if (vmap[w.lo], vmap[w.hi]) == (x.lo, x.hi) and w.funcs == x.funcs:
                cand = (fid, False)
            else:
                fx = _flip_work(x)
                if (vmap[w.lo], vmap[w.hi]) == (fx.lo, fx.hi) and w.funcs == fx.funcs:
                    cand = (fid, True)
                else:
                    continue
            if found is not None:
                return None  # ambiguous; coordinates should prevent this
            found = cand
        if found is None:
            return None
        used.add(found[0])
        pairing[eid] = found
    if len(used) != len(wb):
        return None
    return vmap, pairing


def frame_isometry(fa: FrameGraph, fb: FrameGraph) -> Optional[FrameIsometry]:
    """Coordinate-respecting isometry between two frames, if one exists.

    Valence-2 vertices with affinely continuing coordinates are suppressed
    on both sides first; the returned maps are in terms of the original
    edges, so suppressed vertices of one frame may land inside edges of the
    other.
    """
    if fa.total_length() != fb.total_length():
        return None
    if len(fa.sigma) != len(fb.sigma) or set(fa.sigma) != set(fb.sigma):
        return None
    wa, wb = _suppress(fa), _suppress(fb)
    matched = _match_reduced(fa.sigma, wa, wb)
    if matched is None:
        return None
    vmap, pairing = matched

    # positions of original b-edges inside reduced b-edges
    def layout(work):
        spans = {}
        for rid, w in work.items():
            off = Fraction(0)
            for eid, flipped, ln in w.parts:
                spans[eid] = (rid, off, flipped, ln)
                off += ln
        return spans

    spans_a, spans_b = layout(wa), layout(wb)

    def map_interval(rid_a, lo, hi):
        """Map [lo, hi] of reduced a-edge onto original b-edges."""
        fid, rev = pairing[rid_a]
        length = wa[rid_a].length
        if rev:
            lo, hi = length - hi, length - lo
        out = []
        off = Fraction(0)
        for eid, flipped, ln in wb[fid].parts:
            seg_lo, seg_hi = max(lo, off), min(hi, off + ln)
            if seg_lo < seg_hi:
                local_lo = seg_lo - off
                local_hi = seg_hi - off
                if flipped:
                    out.append((eid, seg_lo, seg_hi, ln - local_lo, -1))
                else:
                    out.append((eid, seg_lo, seg_hi, local_lo, 1))
            off += ln
        if rev:
            out = [(eid, length - s_hi, length - s_lo,
                    start + d * (s_hi - s_lo), -d)
                   for eid, s_lo, s_hi, start, d in reversed(out)]
        return out

    edge_maps = {}
    for ea in fa.edges:
        rid, off, flipped, ln = spans_a[ea.id]
        pieces = map_interval(rid, off, off + ln)
        segs = []
        for eid, s_lo, s_hi, start, d in pieces:
            r_lo, r_hi = s_lo - off, s_hi - off
            if flipped:
                r_lo, r_hi = ln - (s_hi - off), ln - (s_lo - off)
                start, d = start + d * (s_hi - s_lo), -d
            segs.append((eid, r_lo, r_hi, start, d))
        segs.sort(key=lambda s: s[1])
        edge_maps[ea.id] = segs

    vertex_map = {}
    for v in fa.vertices:
        for e in fa.edges:
            if e.lo_vertex == v.id or e.hi_vertex == v.id:
                r = Fraction(0) if e.lo_vertex == v.id else e.length
                for eid, r_lo, r_hi, start, d in edge_maps[e.id]:
                    if r_lo <= r <= r_hi:
                        off_b = start + d * (r - r_lo)
                        eb = next(x for x in fb.edges if x.id == eid)
                        if off_b == 0:
                            vertex_map[v.id] = ("vertex", eb.lo_vertex)
                        elif off_b == eb.length:
                            vertex_map[v.id] = ("vertex", eb.hi_vertex)
                        else:
                            vertex_map[v.id] = ("edge", eid, off_b)
                        break
                break
    return FrameIsometry(edge_maps, vertex_map)


# -- functional model ----------------------------------------------------------

_TOKEN = re.compile(r"\s*(E_[A-Za-z0-9_]+|\d+/\d+|\d+|[()*+^-])")


def _parse_word(expr: str, sigma):
    tokens = []
    pos = 0
    while pos < len(expr):
        m = _TOKEN.match(expr, pos)
        if not m:
            raise FormError(f"bad expression near {expr[pos:]!r}")
        tokens.append(m.group(1))
        pos = m.end()
    tokens.append(None)
    idx = 0

    def peek():
        return tokens[idx]

    def take():
        nonlocal idx
        tok = tokens[idx]
        idx += 1
        return tok

    def parse_expr():
        node = parse_term()
        while peek() in ("+", "-"):
            op = take()
            rhs = parse_term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def parse_term():
        node = parse_factor()
        while peek() == "*":
            take()
            node = ("mul", node, parse_factor())
        return node

    def parse_factor():
        node = parse_atom()
        while peek() == "^":
            take()
            power = take()
            if power is None or not power.isdigit():
                raise FormError("power must be a nonnegative integer")
            node = ("pow", node, int(power))
        return node

    def parse_atom():
        tok = take()
        if tok == "(":
            node = parse_expr()
            if take() != ")":
                raise FormError("unbalanced parentheses")
            return node
        if tok is None:
            raise FormError("unexpected end of expression")
        if tok.startswith("E_"):
            gamma = tok[2:]
            if gamma not in sigma:
                raise FormError(f"unknown generator {tok}")
            return ("gen", gamma)
        return ("const", parse_ratio(tok))

    node = parse_expr()
    if peek() is not None:
        raise FormError("trailing tokens in expression")
    return node


def _eval_word(node, gens: dict[str, np.ndarray], dim: int) -> np.ndarray:
    kind = node[0]
    if kind == "gen":
        return gens[node[1]]
    if kind == "const":
        return float(node[1]) * np.eye(dim)
    if kind == "add":
        return _eval_word(node[1], gens, dim) + _eval_word(node[2], gens, dim)
    if kind == "sub":
        return _eval_word(node[1], gens, dim) - _eval_word(node[2], gens, dim)
    if kind == "mul":
        return _eval_word(node[1], gens, dim) @ _eval_word(node[2], gens, dim)
    if kind == "pow":
        return np.linalg.matrix_power(_eval_word(node[1], gens, dim), node[2])
    raise FormError(f"bad node {kind}")


def evaluate_on_frame(canon: CanonicalFormA, frame: FrameGraph, expr: str,
                      point) -> np.ndarray:
    """Evaluate a generator word at a frame point.

    `point` is ("edge", edge id, r) or ("vertex", vertex id).  At edge
    interiors the word acts in the block's matrix algebra; at vertices the
    value is the block-diagonal sum over the glued boundary components in a
    fixed order.
    """
    word = _parse_word(expr, canon.sigma)
    if point[0] == "edge":
        _, eid, r = point
        edge = next(e for e in frame.edges if e.id == eid)
        block = canon.blocks[edge.ref]
        ab = block.as_ablock()
        r = Fraction(r)
        if not 0 <= r <= block.eps:
            raise FormError("parameter outside the edge")
        gens = {g: ab.value_matrix(g, r) for g in canon.sigma}
        return _eval_word(word, gens, block.kappa)
    if point[0] == "vertex":
        _, vid = point
        vertex = frame.vertex(vid)
        pieces = []
        for ref, side in vertex.members:
            block = canon.blocks[ref]
            ab = block.as_ablock()
            r = Fraction(0) if side == 0 else block.eps
            gens = {g: ab.value_matrix(g, r) for g in canon.sigma}
            end = block.ends["-" if side == 0 else "+"]
            comps = end.components or [None]
            for comp in comps:
                if comp is None:
                    pieces.append(_eval_word(word, gens, block.kappa))
                else:
                    sub = {g: comp.irrep.T @ gens[g] @ comp.irrep
                           for g in canon.sigma}
                    pieces.append(_eval_word(word, sub, comp.irrep.shape[1]))
        dim = sum(p.shape[0] for p in pieces)
        out = np.zeros((dim, dim))
        at = 0
        for p in pieces:
            k = p.shape[0]
            out[at:at + k, at:at + k] = p
            at += k
        return out
    raise FormError(f"bad frame point {point!r}")


# -- export --------------------------------------------------------------------

def frame_to_json(frame: FrameGraph) -> dict:
    return {
        "stage": f"frame-{'a' if frame.kind == 'algebraic' else 'g'}",
        "kind": frame.kind,
        "sigma": list(frame.sigma),
        "vertices": [
            {"id": v.id,
             "coords": {g: [fmt_ratio(x) for x in sorted(v.coords.get(g, frozenset()))]
                        for g in frame.sigma},
             "members": [list(m) for m in v.members]}
            for v in frame.vertices
        ],
        "edges": [
            {"id": e.id, "length": fmt_ratio(e.length),
             "lo": e.lo_vertex, "hi": e.hi_vertex, "ref": e.ref,
             "funcs": {g: [{"slope": s, "t0": fmt_ratio(t0)} for s, t0 in fs]
                       for g, fs in sorted(e.funcs.items())}}
            for e in frame.edges
        ],
    }


def frame_from_json(data: dict) -> FrameGraph:
    if not str(data.get("stage", "")).startswith("frame-"):
        raise FormError(f"not a frame artifact: stage={data.get('stage')!r}")
    vertices = [
        FrameVertex(v["id"],
                    {g: frozenset(parse_ratio(x) for x in vals)
                     for g, vals in v["coords"].items()},
                    tuple(tuple(m) for m in v.get("members", [])))
        for v in data["vertices"]
    ]
    edges = [
        FrameEdge(e["id"], parse_ratio(e["length"]), e["lo"], e["hi"],
                  {g: tuple(sorted((f["slope"], parse_ratio(f["t0"])) for f in fs))
                   for g, fs in e["funcs"].items()},
                  e.get("ref", -1))
        for e in data["edges"]
    ]
    frame = FrameGraph(data["kind"], tuple(data["sigma"]), vertices, edges)
    frame.verify()
    return frame


def frame_to_dot(frame: FrameGraph) -> str:
    lines = [f"graph {frame.kind}_frame {{"]
    for v in frame.vertices:
        coord_text = "; ".join(
            f"{g}:{{{','.join(fmt_ratio(x) for x in sorted(v.coords.get(g, frozenset())))}}}"
            for g in frame.sigma if v.coords.get(g))
        lines.append(f'  {v.id} [label="{v.id} {coord_text}"];')
    for e in frame.edges:
        ranges = []
        for g in frame.sigma:
            spans = [f"[{fmt_ratio(min(t0, t0 + s * e.length))},"
                     f"{fmt_ratio(max(t0, t0 + s * e.length))}]"
                     for s, t0 in e.funcs.get(g, ())]
            if spans:
                ranges.append(f"{g}:" + "".join(spans))
        label = f"{e.id} len={fmt_ratio(e.length)} " + "; ".join(ranges)
        lines.append(f'  {e.lo_vertex} -- {e.hi_vertex} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
