"""Second canonical form: support splitting and geometric family merging.

Families are first split along the transitive closure of "projector
supports intersect"; the pieces carry minimal determination sets.  Two
split families connect when their boundary determination sets coincide as
point sets of the graph with a well-defined cell bijection, and the induced
permutation intertwines the endpoint matrices exactly (including the
outward slope matrices, so tau functions continue affinely).  Chains are
concatenated cell by cell; merged cells may cross healed critical points
and are stored as segment paths with an exact back-map into the graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .canon_algebraic import ChainError, _exact_rank
from .graph import Ball, GraphPoint, MetricGraph, metric_ball
from .rational import endpoint_only_overlaps, fmt_ratio, merge_intervals, parse_ratio
from .source_form import (EikonalTerm, FormError, SourceParametricForm,
                          _graph_from_json, _graph_to_json, _point_to_json,
                          _term_from_json, _term_to_json)


@dataclass(frozen=True)
class SuppClass:
    family_index: int
    members: tuple[tuple[str, int], ...]
    support: tuple[int, ...]  # cell indices of the parent family


def supp_partition(form: SourceParametricForm, family_index: int) -> list[SuppClass]:
    """Transitive closure of support overlap; covers every cell of the family.

    A cell's earliest arrival always leaves a residual with a nonzero entry
    there, so the class supports partition the full index set.
    """
    fam = form.families[family_index]
    gamma_order = {g: i for i, g in enumerate(form.sigma)}
    refs = [(g, i) for g in sorted(fam.terms, key=gamma_order.get)
            for i in range(len(fam.terms[g]))]
    parent: dict = {ref: ref for ref in refs}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    supports = {ref: set(fam.terms[ref[0]][ref[1]].support()) for ref in refs}
    for i, r1 in enumerate(refs):
        for r2 in refs[i + 1:]:
            if supports[r1] & supports[r2]:
                ra, rb = find(r1), find(r2)
                if ra != rb:
                    parent[rb] = ra
    classes: dict = {}
    for ref in refs:
        classes.setdefault(find(ref), []).append(ref)
    out = []
    for root in sorted(classes, key=lambda r: min(classes[r])):
        members = tuple(sorted(classes[root]))
        support = tuple(sorted(set().union(*(supports[m] for m in members))))
        out.append(SuppClass(family_index, members, support))
    covered = set().union(*(set(c.support) for c in out)) if out else set()
    if covered != set(range(fam.size)):
        raise FormError("support classes do not cover the family's cells")
    return out


@dataclass(frozen=True)
class Segment:
    """Piece of an edge traversed by a geometric cell; direction is the
    sign of d(offset)/dr."""

    edge: str
    lo: Fraction
    hi: Fraction
    direction: int

    @property
    def length(self) -> Fraction:
        return self.hi - self.lo


@dataclass
class SegChain:
    """A geometric cell: a path of edge segments parametrized by r."""

    segments: list[Segment]

    @property
    def length(self) -> Fraction:
        return sum((s.length for s in self.segments), Fraction(0))

    def reversed(self) -> "SegChain":
        return SegChain([Segment(s.edge, s.lo, s.hi, -s.direction)
                         for s in reversed(self.segments)])

    def locate(self, r: Fraction) -> tuple[str, Fraction]:
        left = r
        for seg in self.segments:
            if left <= seg.length:
                off = seg.lo + left if seg.direction > 0 else seg.hi - left
                return seg.edge, off
            left -= seg.length
        seg = self.segments[-1]
        off = seg.hi if seg.direction > 0 else seg.lo
        return seg.edge, off

    def point(self, g: MetricGraph, r: Fraction) -> GraphPoint:
        edge, off = self.locate(r)
        return g.point(edge, off)

    def normalized(self) -> "SegChain":
        segs: list[Segment] = []
        for seg in self.segments:
            if segs:
                last = segs[-1]
                if last.edge == seg.edge and last.direction == seg.direction:
                    if seg.direction > 0 and last.hi == seg.lo:
                        segs[-1] = Segment(seg.edge, last.lo, seg.hi, 1)
                        continue
                    if seg.direction < 0 and last.lo == seg.hi:
                        segs[-1] = Segment(seg.edge, seg.lo, last.hi, -1)
                        continue
            segs.append(seg)
        return SegChain(segs)


@dataclass
class GeoFamily:
    """A family of the geometric form; cells are segment paths of equal
    length and the terms' projector vectors live on the cell indices."""

    index: int
    eps: Fraction
    cells: list[SegChain]
    terms: dict[str, tuple[EikonalTerm, ...]]
    kappa: int = 0

    def __post_init__(self):
        if not self.kappa:
            betas = [t.beta for ts in self.terms.values() for t in ts]
            self.kappa = _exact_rank(betas) if betas else 0

    @property
    def size(self) -> int:
        return len(self.cells)

    def boundary_points(self, g: MetricGraph, side: int) -> list[GraphPoint]:
        r = Fraction(0) if side == 0 else self.eps
        return [chain.point(g, r) for chain in self.cells]

    def value_matrix(self, gamma: str, r: Fraction) -> list[list[Fraction]]:
        m = self.size
        out = [[Fraction(0)] * m for _ in range(m)]
        for t in self.terms.get(gamma, ()):
            tau = t.tau(r)
            for i in t.support():
                for j in t.support():
                    out[i][j] += tau * Fraction(t.beta[i] * t.beta[j], t.norm2)
        return out

    def slope_matrix(self, gamma: str) -> list[list[Fraction]]:
        m = self.size
        out = [[Fraction(0)] * m for _ in range(m)]
        for t in self.terms.get(gamma, ()):
            for i in t.support():
                for j in t.support():
                    out[i][j] += t.slope * Fraction(t.beta[i] * t.beta[j], t.norm2)
        return out

    def flipped(self) -> "GeoFamily":
        terms = {
            g: tuple(sorted(
                (EikonalTerm(-t.slope, t.t0 + t.slope * self.eps, t.beta, t.norm2)
                 for t in ts),
                key=lambda t: t.tau(self.eps / 2)))
            for g, ts in self.terms.items()
        }
        return GeoFamily(self.index, self.eps,
                         [c.reversed() for c in self.cells], terms, self.kappa)


def split_families(form: SourceParametricForm) -> list[GeoFamily]:
    """Cut every family along its support classes (minimal determination sets)."""
    out: list[GeoFamily] = []
    for fam in form.families:
        for cls in supp_partition(form, fam.index):
            pos = {k: i for i, k in enumerate(cls.support)}
            cells = []
            for k in cls.support:
                c = fam.cells[k]
                cells.append(SegChain([Segment(c.edge, c.lo, c.hi, c.direction)]))
            terms: dict[str, list[EikonalTerm]] = {}
            for gamma, idx in cls.members:
                t = fam.terms[gamma][idx]
                if not set(t.support()) <= set(cls.support):
                    raise FormError("support leaks across split classes")
                beta = tuple(t.beta[k] for k in cls.support)
                terms.setdefault(gamma, []).append(
                    EikonalTerm(t.slope, t.t0, beta, t.norm2))
            out.append(GeoFamily(
                len(out), fam.eps, cells,
                {g: tuple(sorted(ts, key=lambda t: t.tau(fam.eps / 2)))
                 for g, ts in terms.items()}))
    return out


@dataclass
class Connection:
    side_a: int
    side_b: int
    bijection: tuple[int, ...]  # cell k of A meets cell bijection[k] of B


def _try_connect(g: MetricGraph, sigma, fa: GeoFamily, side_a: int,
                 fb: GeoFamily, side_b: int) -> Optional[Connection]:
    if fa.size != fb.size:
        return None
    pts_a = fa.boundary_points(g, side_a)
    pts_b = fb.boundary_points(g, side_b)
    if len(set(pts_a)) != fa.size or len(set(pts_b)) != fb.size:
        return None
    if set(pts_a) != set(pts_b):
        return None
    lookup = {p: i for i, p in enumerate(pts_b)}
    perm = tuple(lookup[p] for p in pts_a)
    ra = Fraction(0) if side_a == 0 else fa.eps
    rb = Fraction(0) if side_b == 0 else fb.eps
    sgn_a = -1 if side_a == 0 else 1
    sgn_b = -1 if side_b == 0 else 1
    for gamma in sigma:
        va, vb = fa.value_matrix(gamma, ra), fb.value_matrix(gamma, rb)
        da, db = fa.slope_matrix(gamma), fb.slope_matrix(gamma)
        for i in range(fa.size):
            for j in range(fa.size):
                if va[i][j] != vb[perm[i]][perm[j]]:
                    return None
                # outward slopes must be opposite across the junction
                if sgn_a * da[i][j] != -sgn_b * db[perm[i]][perm[j]]:
                    return None
    return Connection(side_a, side_b, perm)


def family_connectable(g: MetricGraph, sigma, fa: GeoFamily,
                       fb: GeoFamily) -> Optional[Connection]:
    """First viable junction between two split families, if any."""
    if fa is fb:
        return None
    for side_a in (1, 0):
        for side_b in (0, 1):
            conn = _try_connect(g, sigma, fa, side_a, fb, side_b)
            if conn is not None:
                return conn
    return None


@dataclass
class GeometricForm:
    graph: MetricGraph
    sigma: tuple[str, ...]
    horizon: Fraction
    families: list[GeoFamily]
    theta: tuple[GraphPoint, ...]

    def tau_ranges(self, gamma: str):
        return [t.tau_range(f.eps) for f in self.families
                for t in f.terms.get(gamma, ())]

    def verify(self, source: Optional[SourceParametricForm] = None):
        from .graph import ControlConfig
        cfg = ControlConfig(self.sigma, self.horizon)
        for gamma in self.sigma:
            ranges = self.tau_ranges(gamma)
            if not endpoint_only_overlaps(ranges):
                raise FormError(f"tau ranges of {gamma} overlap beyond endpoints")
            if self.horizon < cfg.filling_time(self.graph, gamma):
                union = merge_intervals(ranges)
                if union != [(Fraction(1), self.horizon + 1)]:
                    raise FormError(f"tau ranges of {gamma} do not fill [1, T+1]")
        ball = metric_ball(self.graph, self.sigma, self.horizon)
        by_edge: dict[str, list[tuple[Fraction, Fraction]]] = {}
        for fam in self.families:
            for chain in fam.cells:
                for seg in chain.segments:
                    by_edge.setdefault(seg.edge, []).append((seg.lo, seg.hi))
        for eid, ivs in by_edge.items():
            ivs.sort()
            for (a1, b1), (a2, b2) in zip(ivs, ivs[1:]):
                if a2 < b1:
                    raise FormError(f"geometric cells overlap on edge {eid}")
        covered = {eid: merge_intervals(ivs) for eid, ivs in by_edge.items()}
        if covered != ball.segments:
            raise FormError("geometric cells do not cover the T-ball")
        if source is not None:
            for gamma in self.sigma:
                if merge_intervals(self.tau_ranges(gamma)) != \
                        merge_intervals(source.tau_ranges(gamma)):
                    raise FormError(f"spectrum of {gamma} changed by geometric merge")


def _match_geo_ends(g: MetricGraph, sigma, families: list[GeoFamily]):
    partner: dict[tuple[int, int], tuple[int, int, Connection]] = {}
    for i, fa in enumerate(families):
        for j, fb in enumerate(families):
            if j <= i:
                continue
            for side_a in (0, 1):
                for side_b in (0, 1):
                    conn = _try_connect(g, sigma, fa, side_a, fb, side_b)
                    if conn is None:
                        continue
                    for end in ((i, side_a), (j, side_b)):
                        if end in partner:
                            raise ChainError(
                                f"family end {end} admits two distinct junctions")
                    partner[(i, side_a)] = (j, side_b, conn)
                    partner[(j, side_b)] = (i, side_a, conn)
    return partner


def _merge_geo_chain(g: MetricGraph, sigma, families: list[GeoFamily],
                     chain: list[tuple[int, bool]]) -> GeoFamily:
    oriented = [families[i].flipped() if flip else families[i] for i, flip in chain]
    first = oriented[0]
    cells = [SegChain(list(c.segments)) for c in first.cells]
    total = first.eps
    offset = first.eps
    for nxt in oriented[1:]:
        end_pts = [c.point(g, offset) for c in cells]
        # map current chain ends onto the next family's start points
        starts = {nxt.cells[k].point(g, Fraction(0)): k for k in range(nxt.size)}
        if set(end_pts) != set(starts) or len(set(end_pts)) != len(cells):
            raise ChainError("chain junction points do not line up")
        perm = [starts[p] for p in end_pts]
        for gamma in sigma:
            ext = sorted((t.tau(offset), t.slope,
                          tuple(t.beta)) for t in first.terms.get(gamma, ()))
            incoming = sorted((t.tau(Fraction(0)), t.slope,
                               tuple(t.beta[perm[k]] for k in range(len(perm))))
                              for t in nxt.terms.get(gamma, ()))
            sign_fixed = [(v, s, b if next((x for x in b if x), 1) > 0
                           else tuple(-x for x in b)) for v, s, b in incoming]
            if ext != sorted(sign_fixed):
                raise ChainError(
                    f"terms of {gamma} do not continue across a family junction")
        for k in range(len(cells)):
            cells[k] = SegChain(cells[k].segments
                                + nxt.cells[perm[k]].segments).normalized()
        total += nxt.eps
        offset += nxt.eps
    return GeoFamily(first.index, total, cells, dict(first.terms), first.kappa)


def _canonical_orient_geo(fam: GeoFamily) -> GeoFamily:
    def key(r: Fraction):
        return sorted(float(t.tau(r)) for ts in fam.terms.values() for t in ts)

    return fam.flipped() if key(fam.eps) < key(Fraction(0)) else fam


def merge_families(g: MetricGraph, sigma, horizon, pieces: list[GeoFamily],
                   source: Optional[SourceParametricForm] = None) -> GeometricForm:
    partner = _match_geo_ends(g, sigma, pieces)
    links: dict[int, dict[int, tuple[int, int]]] = {}
    for (i, s), (j, t, _) in partner.items():
        links.setdefault(i, {})[s] = (j, t)
    chains = []
    seen: set[int] = set()
    for start in range(len(pieces)):
        if start in seen:
            continue
        sides = links.get(start, {})
        free = [s for s in (0, 1) if s not in sides]
        if not free:
            raise ChainError("geometric families form a closed cycle")
        entry = free[0]
        chain = []
        node, enter = start, entry
        while True:
            seen.add(node)
            chain.append((node, enter == 1))
            exit_side = 1 if enter == 0 else 0
            nxt = links.get(node, {}).get(exit_side)
            if nxt is None:
                break
            node, enter = nxt
            if node in seen:
                raise ChainError("geometric families form a closed cycle")
        chains.append(chain)
    merged = [_canonical_orient_geo(_merge_geo_chain(g, sigma, pieces, chain))
              for chain in chains]

    def fam_key(f: GeoFamily):
        sig = tuple(tuple((t.t0, t.slope, t.beta) for t in f.terms.get(gm, ()))
                    for gm in sigma)
        anchor = min((gseg.edge, gseg.lo) for c in f.cells for gseg in c.segments)
        return (anchor, f.eps, f.size, sig)

    merged.sort(key=fam_key)
    for i, f in enumerate(merged):
        f.index = i
    theta: set[GraphPoint] = set()
    for f in merged:
        theta.update(f.boundary_points(g, 0))
        theta.update(f.boundary_points(g, 1))
    form = GeometricForm(g, tuple(sigma), Fraction(horizon), merged,
                         tuple(sorted(theta, key=GraphPoint.sort_key)))
    form.verify(source)
    return form


def geometric_form(form: SourceParametricForm) -> GeometricForm:
    return merge_families(form.graph, form.sigma, form.horizon,
                          split_families(form), source=form)


# -- serialization ------------------------------------------------------------

def geo_to_json(geo: GeometricForm) -> dict:
    return {
        "stage": "canon-g",
        "graph": _graph_to_json(geo.graph),
        "sigma": list(geo.sigma),
        "horizon": fmt_ratio(geo.horizon),
        "families": [
            {
                "index": f.index,
                "eps": fmt_ratio(f.eps),
                "kappa": f.kappa,
                "cells": [
                    [{"edge": s.edge, "lo": fmt_ratio(s.lo), "hi": fmt_ratio(s.hi),
                      "direction": s.direction} for s in chain.segments]
                    for chain in f.cells
                ],
                "terms": {g: [_term_to_json(t) for t in ts]
                          for g, ts in sorted(f.terms.items())},
            }
            for f in geo.families
        ],
        "critical_points": [_point_to_json(p) for p in geo.theta],
    }


def geo_from_json(data: dict) -> GeometricForm:
    if data.get("stage") != "canon-g":
        raise FormError(f"not a canon-g artifact: stage={data.get('stage')!r}")
    g = _graph_from_json(data["graph"])
    families = []
    for fd in data["families"]:
        cells = [SegChain([Segment(s["edge"], parse_ratio(s["lo"]),
                                   parse_ratio(s["hi"]), s["direction"])
                           for s in chain])
                 for chain in fd["cells"]]
        terms = {gm: tuple(_term_from_json(t) for t in ts)
                 for gm, ts in fd["terms"].items()}
        families.append(GeoFamily(fd["index"], parse_ratio(fd["eps"]),
                                  cells, terms, fd["kappa"]))
    theta = []
    for p in data["critical_points"]:
        if "vertex" in p:
            theta.append(g.vertex_point(p["vertex"]))
        else:
            theta.append(g.point(p["edge"], parse_ratio(p["offset"])))
    form = GeometricForm(g, tuple(data["sigma"]), parse_ratio(data["horizon"]),
                         families, tuple(theta))
    form.verify()
    return form
