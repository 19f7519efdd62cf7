"""Wave rays with Kirchhoff scattering and per-edge arrival tables.

A ray is a scattering path of the unit-speed wave started at a controlled
boundary vertex.  At an interior vertex of valence d the incident amplitude
splits into 2/d on every other branch and (2 - d)/d back along the incoming
branch (d'Alembert matching of continuity plus zero outgoing flow); at a
boundary vertex it reflects with -1 (homogeneous Dirichlet for this source).
Amplitudes are exact rationals and never vanish along a single ray.

Each ray contributes one affine arrival function on its final edge,
t(x) = t0 + sigma * x clipped to t <= T.  Arrival functions with the same
affine form on the same edge are one physical wavefront and are merged by
summing amplitudes; exact cancellations drop out here and never reach the
cell machinery.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .graph import MetricGraph
from .rational import fmt_ratio


@dataclass(frozen=True)
class Hop:
    edge: str
    forward: bool  # True: tail -> head


@dataclass(frozen=True)
class Ray:
    source: str
    hops: tuple[Hop, ...]
    amplitude: Fraction
    depth: Fraction  # cumulative length at the start of the final edge

    @property
    def last(self) -> Hop:
        return self.hops[-1]


class RayBudgetExceeded(RuntimeError):
    pass


def trace_rays(g: MetricGraph, gamma: str, T, max_rays: int = 1_000_000) -> list[Ray]:
    """All scattering paths from `gamma` entering their final edge before T.

    Deterministic depth-first order, children sorted by (edge index, end),
    which is exactly lexicographic order on hop sequences.
    """
    T = Fraction(T)
    if gamma not in g.vertices or not g.vertices[gamma].boundary:
        raise ValueError(f"{gamma!r} is not a boundary vertex")
    (start_edge, start_end), = g.branches[gamma]
    first = Ray(gamma, (Hop(start_edge, start_end == "tail"),), Fraction(1), Fraction(0))
    out: list[Ray] = []
    stack = [first]
    while stack:
        ray = stack.pop()
        out.append(ray)
        if len(out) > max_rays:
            raise RayBudgetExceeded(f"more than {max_rays} rays below horizon {fmt_ratio(T)}")
        hop = ray.last
        edge = g.edges[hop.edge]
        new_depth = ray.depth + edge.length
        if new_depth >= T:
            continue
        arrive_end = "head" if hop.forward else "tail"
        w = g.end_vertex(hop.edge, arrive_end)
        children = []
        if g.vertices[w].boundary:
            children.append(Ray(gamma, ray.hops + (Hop(hop.edge, not hop.forward),),
                                -ray.amplitude, new_depth))
        else:
            d = g.valence(w)
            through = Fraction(2, d)
            back = Fraction(2 - d, d)
            for eid, end in sorted(g.branches[w], key=lambda br: (g.edge_index(br[0]), br[1])):
                coeff = back if (eid, end) == (hop.edge, arrive_end) else through
                children.append(Ray(gamma, ray.hops + (Hop(eid, end == "tail"),),
                                    ray.amplitude * coeff, new_depth))
        stack.extend(reversed(children))  # keep DFS order lexicographic
    return out


@dataclass(frozen=True)
class ArrivalRecord:
    """Merged affine arrival t(x) = t0 + sigma*x on edge coords, valid on [lo, hi]."""

    edge: str
    sigma: int  # +1 travelling tail->head, -1 the other way
    t0: Fraction
    lo: Fraction
    hi: Fraction
    amplitude: Fraction

    def time_at(self, x: Fraction) -> Fraction:
        return self.t0 + self.sigma * x

    def pos_at(self, t: Fraction) -> Fraction:
        return (t - self.t0) * self.sigma

    def time_range(self) -> tuple[Fraction, Fraction]:
        a, b = self.time_at(self.lo), self.time_at(self.hi)
        return (a, b) if a <= b else (b, a)


def _ray_validity(g: MetricGraph, ray: Ray, T: Fraction):
    edge = g.edges[ray.last.edge]
    if ray.last.forward:
        sigma, t0 = 1, ray.depth
        lo, hi = Fraction(0), min(edge.length, T - ray.depth)
    else:
        sigma, t0 = -1, ray.depth + edge.length
        lo, hi = max(Fraction(0), edge.length - (T - ray.depth)), edge.length
    return sigma, t0, lo, hi


def arrival_table(g: MetricGraph, rays: Iterable[Ray], T) -> list[ArrivalRecord]:
    """Per-edge merged arrival functions, zero amplitude sums dropped."""
    T = Fraction(T)
    acc: dict[tuple[str, int, Fraction], list] = {}
    for ray in rays:
        sigma, t0, lo, hi = _ray_validity(g, ray, T)
        if hi <= lo:
            continue
        key = (ray.last.edge, sigma, t0)
        if key in acc:
            entry = acc[key]
            assert (entry[0], entry[1]) == (lo, hi)
            entry[2] += ray.amplitude
        else:
            acc[key] = [lo, hi, ray.amplitude]
    records = [
        ArrivalRecord(eid, sigma, t0, lo, hi, amp)
        for (eid, sigma, t0), (lo, hi, amp) in acc.items()
        if amp != 0
    ]
    records.sort(key=lambda r: (g.edge_index(r.edge), r.sigma, r.t0))
    return records


def rays_to_json(rays: Iterable[Ray]) -> dict:
    """Debug dump of the ray tree (the space-time scattering history)."""
    return {
        "rays": [
            {
                "source": r.source,
                "hops": [{"edge": h.edge, "forward": h.forward} for h in r.hops],
                "amplitude": fmt_ratio(r.amplitude),
                "depth": fmt_ratio(r.depth),
            }
            for r in rays
        ]
    }
