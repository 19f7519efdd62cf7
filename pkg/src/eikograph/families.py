"""Partition of the wave-filled domain into cells and coherent families.

For a fixed source gamma, an impulse of age h occupies every point at ray
distance exactly h; the vector of its amplitudes is the direction the
reachable subspace gains at time h.  Determination sets must therefore be
closed under simultaneity: whenever a cell carries an arrival at time h(r),
every other location reached at the same h(r) belongs to the same family.

The construction cuts edges at a finite set of candidate breakpoints and
then propagates cuts through time synchronization until a fixed point:

  * validity endpoints of arrival records, vertices, horizon clips;
  * interior crossings of two same-source records on one edge;
  * preimages, under any record, of the times all existing cuts are passed.

After the fixed point, for each source the records decompose into slots
whose time ranges are exactly the gaps between consecutive cut times, so
slots of one source either share a gap (fully synchronized) or have
disjoint time ranges.  Cells are grouped into families by the transitive
closure of gap sharing and parametrized by time offset within a gap.

Over-refinement is deliberate; the canonical-form stages heal spurious
cuts by re-merging.  Orientation conflicts (a cell forced into one family
with two different parametrizations) are resolved by refining at the
midpoint of the clash and rebuilding; this terminates because all cut
positions live on a fixed rational lattice.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .graph import Ball, GraphPoint, MetricGraph, metric_ball
from .rational import merge_intervals
from .rays import ArrivalRecord, arrival_table, trace_rays


class FamilyConstructionError(RuntimeError):
    """Internal consistency failure (breakpoint refinement did not settle)."""


@dataclass(frozen=True)
class Cell:
    """Open sub-interval of an edge, atomic after breakpoint cutting."""

    edge: str
    lo: Fraction
    hi: Fraction

    @property
    def length(self) -> Fraction:
        return self.hi - self.lo


@dataclass(frozen=True)
class Column:
    """One synchronized arrival across a family: time t(r) = t0 + slope*r.

    `amps[k]` is the amplitude with which this front hits the moving point
    of cell k; zero where the front misses the cell.
    """

    gamma: str
    t0: Fraction
    slope: int
    amps: tuple[Fraction, ...]

    def time_at(self, r: Fraction) -> Fraction:
        return self.t0 + self.slope * r


@dataclass
class Family:
    """Cells swept coherently by the determination set Lambda[x(r)].

    cells[k] has parametrization x_k(r) = origins[k] + directions[k] * r
    for r in (0, eps); columns are per-source synchronized arrivals with a
    constant pattern over the whole parameter interval.
    """

    index: int
    eps: Fraction
    cells: list[Cell]
    origins: list[Fraction]
    directions: list[int]
    columns: dict[str, list[Column]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.cells)

    def position(self, k: int, r: Fraction) -> Fraction:
        return self.origins[k] + self.directions[k] * r

    def point(self, g: MetricGraph, k: int, r: Fraction) -> GraphPoint:
        return g.point(self.cells[k].edge, self.position(k, r))

    def determination_set(self, g: MetricGraph, r: Fraction) -> list[GraphPoint]:
        return [self.point(g, k, r) for k in range(self.size)]

    def verify_constant_pattern(self, records_by_gamma: dict[str, list[ArrivalRecord]]):
        """Recompute arrivals at three interior r values straight from the
        records and compare with the column data, exactly."""
        for num in (1, 2, 3):
            r = self.eps * num / 4
            for gamma, records in records_by_gamma.items():
                seen: dict[Fraction, dict[int, Fraction]] = {}
                for k, cell in enumerate(self.cells):
                    x = self.position(k, r)
                    for rec in records:
                        if rec.edge == cell.edge and rec.lo <= x <= rec.hi:
                            seen.setdefault(rec.time_at(x), {})[k] = rec.amplitude
                expected: dict[Fraction, dict[int, Fraction]] = {}
                for col in self.columns.get(gamma, []):
                    expected[col.time_at(r)] = {
                        k: a for k, a in enumerate(col.amps) if a != 0
                    }
                if seen != expected:
                    raise FamilyConstructionError(
                        f"family {self.index}: arrival pattern not constant at r={r}"
                    )


@dataclass
class Partition:
    """Result of the cell construction: families plus the critical set."""

    families: list[Family]
    theta: tuple[GraphPoint, ...]
    ball: Ball
    records: dict[str, list[ArrivalRecord]]


def _initial_cuts(g: MetricGraph, records: list[tuple[str, ArrivalRecord]]):
    cuts: dict[str, set[Fraction]] = {eid: {Fraction(0), e.length} for eid, e in g.edges.items()}
    for _, rec in records:
        cuts[rec.edge].update((rec.lo, rec.hi))
    by_edge_gamma: dict[tuple[str, str], list[ArrivalRecord]] = {}
    for gamma, rec in records:
        by_edge_gamma.setdefault((rec.edge, gamma), []).append(rec)
    for (eid, _), recs in by_edge_gamma.items():
        for i, r1 in enumerate(recs):
            for r2 in recs[i + 1:]:
                if r1.sigma == r2.sigma:
                    continue
                # t1(x) = t2(x) with opposite slopes
                x = (r2.t0 - r1.t0) / (r1.sigma - r2.sigma)
                if max(r1.lo, r2.lo) < x < min(r1.hi, r2.hi):
                    cuts[eid].add(x)
    return cuts


def _propagate_cuts(g: MetricGraph, records: list[tuple[str, ArrivalRecord]],
                    cuts: dict[str, set[Fraction]]):
    """Close the cut set under time synchronization (per source)."""
    by_gamma: dict[str, list[ArrivalRecord]] = {}
    for gamma, rec in records:
        by_gamma.setdefault(gamma, []).append(rec)
    changed = True
    while changed:
        changed = False
        for gamma, recs in by_gamma.items():
            times: set[Fraction] = set()
            for rec in recs:
                for c in cuts[rec.edge]:
                    if rec.lo <= c <= rec.hi:
                        times.add(rec.time_at(c))
            for rec in recs:
                t_lo, t_hi = rec.time_range()
                for h in times:
                    if t_lo < h < t_hi:
                        x = rec.pos_at(h)
                        if x not in cuts[rec.edge]:
                            cuts[rec.edge].add(x)
                            changed = True


class _DSU:
    def __init__(self):
        self.parent: dict = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def _build_once(g: MetricGraph, records: list[tuple[str, ArrivalRecord]],
                cuts: dict[str, set[Fraction]]):
    """One construction attempt; returns (families, None) or (None, new_cuts)."""
    _propagate_cuts(g, records, cuts)

    cells: list[Cell] = []
    cells_of_edge: dict[str, list[Cell]] = {}
    for eid in g.edges:
        marks = sorted(cuts[eid])
        row = []
        for lo, hi in zip(marks, marks[1:]):
            covered = any(rec.edge == eid and rec.lo <= lo and hi <= rec.hi
                          for _, rec in records)
            if covered:
                cell = Cell(eid, lo, hi)
                row.append(cell)
                cells.append(cell)
        cells_of_edge[eid] = row

    # slots grouped by (gamma, gap); a gap is the slot's exact time range
    groups: dict[tuple[str, Fraction, Fraction], list[tuple[Cell, ArrivalRecord]]] = {}
    for gamma, rec in records:
        for cell in cells_of_edge[rec.edge]:
            if rec.lo <= cell.lo and cell.hi <= rec.hi:
                lo_t, hi_t = sorted((rec.time_at(cell.lo), rec.time_at(cell.hi)))
                groups.setdefault((gamma, lo_t, hi_t), []).append((cell, rec))

    for (gamma, lo_t, hi_t), slots in groups.items():
        per_cell: dict[Cell, int] = {}
        for cell, _ in slots:
            per_cell[cell] = per_cell.get(cell, 0) + 1
        if any(n > 1 for n in per_cell.values()):
            raise FamilyConstructionError(
                f"two synchronized fronts of {gamma} share a cell; missing breakpoint")

    dsu = _DSU()
    for cell in cells:
        dsu.find(cell)
    for slots in groups.values():
        first = slots[0][0]
        for cell, _ in slots[1:]:
            dsu.union(first, cell)

    members: dict[Cell, list[Cell]] = {}
    for cell in cells:
        members.setdefault(dsu.find(cell), []).append(cell)

    group_keys_of_cell: dict[Cell, list] = {c: [] for c in cells}
    for key, slots in groups.items():
        for cell, _ in slots:
            group_keys_of_cell[cell].append(key)

    families: list[Family] = []
    new_cuts: dict[str, set[Fraction]] = {}

    def order_key(cell: Cell):
        return (g.edge_index(cell.edge), cell.lo)

    gamma_order = {}
    for gamma, _ in records:
        gamma_order.setdefault(gamma, len(gamma_order))

    for root in sorted(members, key=order_key):
        fam_cells = sorted(members[root], key=order_key)
        fam_group_keys = sorted(
            {key for c in fam_cells for key in group_keys_of_cell[c]},
            key=lambda key: (-len(groups[key]), key[1], gamma_order[key[0]], key[2]),
        )
        # defining gap: most cells, then earliest, then source order
        cell_map: dict[Cell, tuple[Fraction, int]] = {}
        time_fun: dict[tuple, tuple[Fraction, int]] = {}
        base = fam_group_keys[0]
        time_fun[base] = (base[1], 1)  # t(r) = gap_start + r
        eps = base[2] - base[1]
        queue = [base]
        conflict_positions: set[tuple[str, Fraction]] = set()

        def clash_cell(cell: Cell, m1, m2):
            o1, d1 = m1
            o2, d2 = m2
            if d1 != d2:
                rstar = (o2 - o1) / (d1 - d2)
                x = o1 + d1 * rstar
                if cell.lo < x < cell.hi:
                    conflict_positions.add((cell.edge, x))
                    return
            conflict_positions.add((cell.edge, (cell.lo + cell.hi) / 2))

        while queue:
            key = queue.pop(0)
            a, s = time_fun[key]
            for cell, rec in sorted(groups[key], key=lambda sl: order_key(sl[0])):
                # x(r) = sigma * (t(r) - t0)
                omap = (rec.sigma * (a - rec.t0), rec.sigma * s)
                if cell in cell_map:
                    if cell_map[cell] != omap:
                        clash_cell(cell, cell_map[cell], omap)
                    continue
                cell_map[cell] = omap
                for other_key in group_keys_of_cell[cell]:
                    g2, rec2 = None, None
                    for c2, r2 in groups[other_key]:
                        if c2 == cell:
                            rec2 = r2
                            break
                    o, d = omap
                    cand = (rec2.t0 + rec2.sigma * o, rec2.sigma * d)
                    if other_key in time_fun:
                        if time_fun[other_key] != cand:
                            a1, s1 = time_fun[other_key]
                            a2, s2 = cand
                            if s1 != s2:
                                hstar = a1 + s1 * ((a2 - a1) / (s1 - s2))
                                for c3, r3 in groups[other_key]:
                                    x3 = r3.pos_at(hstar)
                                    if c3.lo < x3 < c3.hi:
                                        conflict_positions.add((c3.edge, x3))
                            else:
                                for c3, _ in groups[other_key]:
                                    conflict_positions.add((c3.edge, (c3.lo + c3.hi) / 2))
                    else:
                        time_fun[other_key] = cand
                        queue.append(other_key)

        if conflict_positions:
            for eid, x in conflict_positions:
                new_cuts.setdefault(eid, set()).add(x)
            continue

        for cell in fam_cells:
            o, d = cell_map[cell]
            ok = (o == cell.lo and d == 1) or (o == cell.hi and d == -1)
            if not ok or cell.length != eps:
                raise FamilyConstructionError(
                    f"cell {cell} parametrization inconsistent with eps {eps}")

        columns: dict[str, list[Column]] = {}
        idx = {cell: k for k, cell in enumerate(fam_cells)}
        for key in fam_group_keys:
            gamma = key[0]
            a, s = time_fun[key]
            amps = [Fraction(0)] * len(fam_cells)
            for cell, rec in groups[key]:
                amps[idx[cell]] = rec.amplitude
            columns.setdefault(gamma, []).append(Column(gamma, a, s, tuple(amps)))
        half = eps / 2
        for gamma, cols in columns.items():
            cols.sort(key=lambda col: col.time_at(half))
            for c1, c2 in zip(cols, cols[1:]):
                if c1.time_at(half) == c2.time_at(half):
                    raise FamilyConstructionError("two columns share a time value")

        families.append(Family(len(families), eps, fam_cells,
                               [cell_map[c][0] for c in fam_cells],
                               [cell_map[c][1] for c in fam_cells],
                               columns))

    if new_cuts:
        return None, new_cuts
    return families, None


def _critical_points(g: MetricGraph, ball: Ball, cuts: dict[str, set[Fraction]]):
    points: set[GraphPoint] = set()
    for eid, segments in ball.segments.items():
        for lo, hi in segments:
            points.add(g.point(eid, lo))
            points.add(g.point(eid, hi))
            for c in cuts[eid]:
                if lo < c < hi:
                    points.add(g.point(eid, c))
    return tuple(sorted(points, key=GraphPoint.sort_key))


def build_cells_and_families(g: MetricGraph, sigma, T,
                             extra_cuts: Optional[dict[str, set[Fraction]]] = None,
                             max_restarts: int = 32) -> Partition:
    """Trace all sources, cut, synchronize, and group cells into families."""
    T = Fraction(T)
    tagged: list[tuple[str, ArrivalRecord]] = []
    records: dict[str, list[ArrivalRecord]] = {}
    for gamma in sigma:
        recs = arrival_table(g, trace_rays(g, gamma, T), T)
        records[gamma] = recs
        tagged.extend((gamma, rec) for rec in recs)

    ball = metric_ball(g, sigma, T)
    covered: dict[str, list[tuple[Fraction, Fraction]]] = {}
    for _, rec in tagged:
        covered.setdefault(rec.edge, []).append((rec.lo, rec.hi))
    covered = {eid: merge_intervals(ivs) for eid, ivs in covered.items()}
    if covered != ball.segments:
        raise FamilyConstructionError("arrival coverage disagrees with the metric ball")

    cuts = _initial_cuts(g, tagged)
    if extra_cuts:
        for eid, xs in extra_cuts.items():
            cuts[eid].update(xs)
    for _ in range(max_restarts):
        families, new_cuts = _build_once(g, tagged, cuts)
        if families is not None:
            for fam in families:
                fam.verify_constant_pattern(records)
            theta = _critical_points(g, ball, cuts)
            return Partition(families, theta, ball, records)
        for eid, xs in new_cuts.items():
            cuts[eid].update(xs)
    raise FamilyConstructionError("breakpoint refinement did not stabilize")
