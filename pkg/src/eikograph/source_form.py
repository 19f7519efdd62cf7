"""Source parametric form: per-family eikonal blocks sum tau_i(r) * P_i.

For each family and each source, the synchronized arrival columns are
orthogonalized in time order; the Gram-Schmidt residual of a column is the
direction the reachable subspace gains at that arrival, so the block of the
eikonal on the family is sum_i (1 + t_i(r)) P_i with P_i the projector onto
residual i.  The +1 spectral shift is baked into tau at construction, and
projectors are kept as unnormalized integer vectors (primitive, first
nonzero entry positive) with their exact squared norms, so every
orthogonality and support decision downstream is exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd
from typing import Iterable, Optional

from .families import Cell, Column, Family, Partition, build_cells_and_families
from .graph import (Ball, ControlConfig, Edge, GraphPoint, MetricGraph,
                    ParsedInput, Vertex, metric_ball)
from .rational import endpoint_only_overlaps, fmt_ratio, merge_intervals, parse_ratio


class FormError(ValueError):
    pass


def primitive(vec: Iterable[Fraction]) -> tuple[int, ...]:
    """Scale a nonzero rational vector to coprime integers, leading entry > 0."""
    fracs = [Fraction(x) for x in vec]
    denom = 1
    for x in fracs:
        denom = denom * x.denominator // gcd(denom, x.denominator)
    ints = [int(x * denom) for x in fracs]
    g = 0
    for n in ints:
        g = gcd(g, abs(n))
    if g == 0:
        raise FormError("zero vector has no primitive form")
    ints = [n // g for n in ints]
    lead = next(n for n in ints if n != 0)
    if lead < 0:
        ints = [-n for n in ints]
    return tuple(ints)


@dataclass(frozen=True)
class EikonalTerm:
    """tau(r) = t0 + slope*r on [0, eps] paired with projector beta betaT / |beta|^2."""

    slope: int
    t0: Fraction
    beta: tuple[int, ...]
    norm2: int

    def tau(self, r: Fraction) -> Fraction:
        return self.t0 + self.slope * r

    def tau_range(self, eps: Fraction) -> tuple[Fraction, Fraction]:
        a, b = self.t0, self.t0 + self.slope * eps
        return (a, b) if a <= b else (b, a)

    def support(self) -> tuple[int, ...]:
        return tuple(k for k, b in enumerate(self.beta) if b != 0)


@dataclass
class CellRef:
    """Family cell with its parametrization, x(r) = origin + direction*r."""

    edge: str
    lo: Fraction
    hi: Fraction
    origin: Fraction
    direction: int

    def position(self, r: Fraction) -> Fraction:
        return self.origin + self.direction * r


@dataclass
class FormFamily:
    index: int
    eps: Fraction
    cells: list[CellRef]
    terms: dict[str, tuple[EikonalTerm, ...]]

    @property
    def size(self) -> int:
        return len(self.cells)

    def point(self, g: MetricGraph, k: int, r: Fraction) -> GraphPoint:
        return g.point(self.cells[k].edge, self.cells[k].position(r))

    def boundary_set(self, g: MetricGraph, side: int) -> list[GraphPoint]:
        r = Fraction(0) if side == 0 else self.eps
        return [self.point(g, k, r) for k in range(self.size)]


@dataclass
class SourceParametricForm:
    graph: MetricGraph
    sigma: tuple[str, ...]
    horizon: Fraction
    families: list[FormFamily]
    theta: tuple[GraphPoint, ...]

    def eikonal_matrix(self, family_index: int, gamma: str, r) -> list[list[Fraction]]:
        """Exact m x m block of the eikonal at parameter r."""
        fam = self.families[family_index]
        r = Fraction(r)
        if r < 0 or r > fam.eps:
            raise FormError(f"r={r} outside [0, {fam.eps}]")
        m = fam.size
        out = [[Fraction(0)] * m for _ in range(m)]
        for term in fam.terms.get(gamma, ()):
            tau = term.tau(r)
            for i in range(m):
                if term.beta[i] == 0:
                    continue
                for j in range(m):
                    if term.beta[j] != 0:
                        out[i][j] += tau * Fraction(term.beta[i] * term.beta[j], term.norm2)
        return out

    def tau_ranges(self, gamma: str) -> list[tuple[Fraction, Fraction]]:
        return [term.tau_range(fam.eps)
                for fam in self.families
                for term in fam.terms.get(gamma, ())]

    def verify(self):
        for fam in self.families:
            if fam.eps <= 0:
                raise FormError(f"family {fam.index} has eps <= 0")
            for gamma, terms in fam.terms.items():
                for t1 in terms:
                    if abs(t1.slope) != 1:
                        raise FormError("tau slope must be +-1")
                    lo, _ = t1.tau_range(fam.eps)
                    if lo < 1:
                        raise FormError("tau must stay >= 1")
                for i, t1 in enumerate(terms):
                    for t2 in terms[i + 1:]:
                        dot = sum(a * b for a, b in zip(t1.beta, t2.beta))
                        if dot != 0:
                            raise FormError(
                                f"projectors of {gamma} in family {fam.index} not orthogonal")
        cfg = ControlConfig(self.sigma, self.horizon)
        for gamma in self.sigma:
            ranges = self.tau_ranges(gamma)
            if not endpoint_only_overlaps(ranges):
                raise FormError(f"tau ranges of {gamma} overlap beyond endpoints")
            if self.horizon < cfg.filling_time(self.graph, gamma):
                union = merge_intervals(ranges)
                if union != [(Fraction(1), self.horizon + 1)]:
                    raise FormError(
                        f"tau ranges of {gamma} do not fill [1, T+1]: {union}")
        self._verify_cover()

    def _verify_cover(self):
        ball = metric_ball(self.graph, self.sigma, self.horizon)
        by_edge: dict[str, list[tuple[Fraction, Fraction]]] = {}
        for fam in self.families:
            for cell in fam.cells:
                by_edge.setdefault(cell.edge, []).append((cell.lo, cell.hi))
        for eid, ivs in by_edge.items():
            ivs.sort()
            for (a1, b1), (a2, b2) in zip(ivs, ivs[1:]):
                if a2 < b1:
                    raise FormError(f"overlapping cells on edge {eid}")
        covered = {eid: merge_intervals(ivs) for eid, ivs in by_edge.items()}
        if covered != ball.segments:
            raise FormError("cells plus critical points do not cover the T-ball")
        theta = set(self.theta)
        for fam in self.families:
            for cell in fam.cells:
                for off in (cell.lo, cell.hi):
                    if self.graph.point(cell.edge, off) not in theta:
                        raise FormError("cell endpoint missing from the critical set")


def amplitude_matrix(family: Family, gamma: str):
    """Columns ordered by arrival time; A[k][i] = amplitude of column i at cell k."""
    cols = family.columns.get(gamma, [])
    times = [(c.t0, c.slope) for c in cols]
    matrix = [[cols[i].amps[k] for i in range(len(cols))] for k in range(family.size)]
    return matrix, times


def gram_schmidt_terms(matrix, times, eps: Fraction) -> list[EikonalTerm]:
    """One term per column with nonzero residual; tau includes the +1 shift."""
    m = len(matrix)
    n = len(times)
    cols = [[matrix[k][i] for k in range(m)] for i in range(n)]
    basis: list[tuple[list[Fraction], Fraction]] = []  # (residual, |residual|^2)
    terms = []
    for i, col in enumerate(cols):
        resid = [Fraction(x) for x in col]
        for b, b2 in basis:
            coef = sum(x * y for x, y in zip(resid, b)) / b2
            if coef != 0:
                resid = [x - coef * y for x, y in zip(resid, b)]
        norm2 = sum(x * x for x in resid)
        if norm2 == 0:
            continue
        basis.append((resid, norm2))
        t0, slope = times[i]
        beta = primitive(resid)
        terms.append(EikonalTerm(slope, 1 + t0, beta, sum(b * b for b in beta)))
    return terms


def _family_to_form(fam: Family) -> FormFamily:
    cells = [CellRef(c.edge, c.lo, c.hi, o, d)
             for c, o, d in zip(fam.cells, fam.origins, fam.directions)]
    terms = {}
    for gamma in fam.columns:
        matrix, times = amplitude_matrix(fam, gamma)
        got = gram_schmidt_terms(matrix, times, fam.eps)
        if got:
            terms[gamma] = tuple(got)
    return FormFamily(fam.index, fam.eps, cells, terms)


def assemble_source_form(g: MetricGraph, sigma, T) -> SourceParametricForm:
    cfg = ControlConfig(tuple(sigma), Fraction(T))
    cfg.validate(g)
    part = build_cells_and_families(g, cfg.sigma, cfg.horizon)
    form = SourceParametricForm(
        g, cfg.sigma, cfg.horizon,
        [_family_to_form(fam) for fam in part.families],
        part.theta,
    )
    form.verify()
    return form


# -- over-refinement ----------------------------------------------------------

def refine_family(form: SourceParametricForm, family_index: int, r0) -> SourceParametricForm:
    """Split one family at interior parameter r0 (an artificial extra cut).

    Downstream merging is expected to heal the cut: canonical forms and
    frames of the refined form must match the original ones.
    """
    r0 = Fraction(r0)
    fam = form.families[family_index]
    if not 0 < r0 < fam.eps:
        raise FormError("refinement parameter must be interior")
    lower = FormFamily(
        fam.index, r0,
        [CellRef(c.edge, min(c.position(Fraction(0)), c.position(r0)),
                 max(c.position(Fraction(0)), c.position(r0)),
                 c.origin, c.direction) for c in fam.cells],
        {gamma: terms for gamma, terms in fam.terms.items()},
    )
    upper = FormFamily(
        fam.index + 1, fam.eps - r0,
        [CellRef(c.edge, min(c.position(r0), c.position(fam.eps)),
                 max(c.position(r0), c.position(fam.eps)),
                 c.position(r0), c.direction) for c in fam.cells],
        {gamma: tuple(EikonalTerm(t.slope, t.t0 + t.slope * r0, t.beta, t.norm2)
                      for t in terms)
         for gamma, terms in fam.terms.items()},
    )
    families = []
    for f in form.families:
        if f.index == family_index:
            families.extend([lower, upper])
        else:
            families.append(f)
    for i, f in enumerate(families):
        f.index = i
    theta = set(form.theta)
    for k in range(fam.size):
        theta.add(fam.point(form.graph, k, r0))
    refined = SourceParametricForm(form.graph, form.sigma, form.horizon,
                                   families, tuple(sorted(theta, key=GraphPoint.sort_key)))
    refined.verify()
    return refined


def flip_family(form: SourceParametricForm, family_index: int) -> SourceParametricForm:
    """Reverse the parametrization of one family (r -> eps - r)."""
    fam = form.families[family_index]
    flipped = FormFamily(
        fam.index, fam.eps,
        [CellRef(c.edge, c.lo, c.hi, c.position(fam.eps), -c.direction) for c in fam.cells],
        {gamma: tuple(sorted(
            (EikonalTerm(-t.slope, t.t0 + t.slope * fam.eps, t.beta, t.norm2)
             for t in terms),
            key=lambda t: t.tau(fam.eps / 2)))
         for gamma, terms in fam.terms.items()},
    )
    families = list(form.families)
    families[family_index] = flipped
    out = SourceParametricForm(form.graph, form.sigma, form.horizon, families, form.theta)
    out.verify()
    return out


# -- serialization ------------------------------------------------------------

def _graph_to_json(g: MetricGraph) -> dict:
    return {
        "vertices": [{"id": v.id, "kind": "boundary" if v.boundary else "interior"}
                     for v in g.vertices.values()],
        "edges": [{"id": e.id, "tail": e.tail, "head": e.head,
                   "length": fmt_ratio(e.length), "unbounded": e.unbounded}
                  for e in g.edges.values()],
    }


def _graph_from_json(data: dict) -> MetricGraph:
    return MetricGraph(
        [Vertex(v["id"], v["kind"] == "boundary") for v in data["vertices"]],
        [Edge(e["id"], e["tail"], e["head"], parse_ratio(e["length"]),
              e.get("unbounded", False)) for e in data["edges"]],
    )


def _point_to_json(p: GraphPoint) -> dict:
    if p.is_vertex():
        return {"vertex": p.vertex}
    return {"edge": p.edge, "offset": fmt_ratio(p.offset)}


def _point_from_json(g: MetricGraph, data: dict) -> GraphPoint:
    if "vertex" in data:
        return g.vertex_point(data["vertex"])
    return g.point(data["edge"], parse_ratio(data["offset"]))


def _term_to_json(t: EikonalTerm) -> dict:
    return {"slope": t.slope, "t0": fmt_ratio(t.t0),
            "beta": list(t.beta), "norm2": t.norm2}


def _term_from_json(data: dict) -> EikonalTerm:
    return EikonalTerm(data["slope"], parse_ratio(data["t0"]),
                       tuple(data["beta"]), data["norm2"])


def form_to_json(form: SourceParametricForm) -> dict:
    return {
        "stage": "source-form",
        "graph": _graph_to_json(form.graph),
        "sigma": list(form.sigma),
        "horizon": fmt_ratio(form.horizon),
        "families": [
            {
                "index": fam.index,
                "eps": fmt_ratio(fam.eps),
                "cells": [{"edge": c.edge, "lo": fmt_ratio(c.lo), "hi": fmt_ratio(c.hi),
                           "origin": fmt_ratio(c.origin), "direction": c.direction}
                          for c in fam.cells],
                "terms": {gamma: [_term_to_json(t) for t in terms]
                          for gamma, terms in sorted(fam.terms.items())},
            }
            for fam in form.families
        ],
        "critical_points": [_point_to_json(p) for p in form.theta],
    }


def form_from_json(data: dict) -> SourceParametricForm:
    if data.get("stage") != "source-form":
        raise FormError(f"not a source-form artifact: stage={data.get('stage')!r}")
    g = _graph_from_json(data["graph"])
    families = [
        FormFamily(
            fam["index"], parse_ratio(fam["eps"]),
            [CellRef(c["edge"], parse_ratio(c["lo"]), parse_ratio(c["hi"]),
                     parse_ratio(c["origin"]), c["direction"]) for c in fam["cells"]],
            {gamma: tuple(_term_from_json(t) for t in terms)
             for gamma, terms in fam["terms"].items()},
        )
        for fam in data["families"]
    ]
    theta = tuple(_point_from_json(g, p) for p in data["critical_points"])
    form = SourceParametricForm(g, tuple(data["sigma"]), parse_ratio(data["horizon"]),
                                families, theta)
    form.verify()
    return form


def dumps_canonical(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
