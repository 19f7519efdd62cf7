"""Independent wave-equation oracle on the graph.

Leapfrog scheme with dt = h, which is exact for the 1-D wave operator away
from vertices; the vertex update u_new(w) = (2/d) sum_neighbors u - u_old(w)
enforces continuity plus discrete zero outgoing flow and reproduces the
2/d and (2-d)/d scattering of unit pulses exactly on the grid.  Everything
here is float; it validates the exact pipeline and never feeds it.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .graph import MetricGraph
from .source_form import SourceParametricForm


@dataclass
class DiscreteGraph:
    """Uniform grid of step h on every edge; vertex values are shared."""

    graph: MetricGraph
    h: Fraction
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for e in self.graph.edges.values():
            n = e.length / self.h
            if n.denominator != 1:
                raise ValueError(f"h={self.h} does not divide edge {e.id} of length {e.length}")
            self.counts[e.id] = int(n)

    def node_weight(self, eid: str, j: int) -> float:
        h = float(self.h)
        return h if 0 < j < self.counts[eid] else h / 2

    def edge_nodes(self, eid: str) -> np.ndarray:
        return np.arange(self.counts[eid] + 1) * float(self.h)


@dataclass
class ControlPulse:
    """Hat profile of width 4h starting at `onset`; vanishes near t = 0."""

    gamma: str
    onset: Fraction
    width: Fraction

    def sample(self, t: float) -> float:
        center = float(self.onset) + float(self.width) / 2
        half = float(self.width) / 2
        return max(0.0, 1.0 - abs(t - center) / half)


class WaveField:
    """State of the wave on the discrete graph, vectorized over controls."""

    def __init__(self, disc: DiscreteGraph, ncols: int):
        self.disc = disc
        self.ncols = ncols
        self.u = {eid: np.zeros((n + 1, ncols)) for eid, n in disc.counts.items()}

    def copy(self):
        out = WaveField(self.disc, self.ncols)
        for eid in self.u:
            out.u[eid] = self.u[eid].copy()
        return out

    def vertex_value(self, vid: str) -> np.ndarray:
        eid, end = self.disc.graph.branches[vid][0]
        row = 0 if end == "tail" else self.disc.counts[eid]
        return self.u[eid][row]

    def as_vector(self) -> np.ndarray:
        """Weighted coordinates: Euclidean inner product equals L2(graph)."""
        disc = self.disc
        parts = []
        for eid in disc.graph.edges:
            w = np.full(disc.counts[eid] + 1, float(disc.h))
            w[0] = w[-1] = float(disc.h) / 2
            parts.append(self.u[eid] * np.sqrt(w)[:, None])
        return np.vstack(parts)

    def energy(self, prev: "WaveField") -> float:
        dt = float(self.disc.h)
        total = 0.0
        for eid, u in self.u.items():
            up = prev.u[eid]
            vel = (u - up) / dt
            total += float(np.sum(vel[:-1] ** 2 + vel[1:] ** 2) / 2 * dt / 2)
            grad = (u[1:] - u[:-1]) / dt
            total += float(np.sum(grad ** 2) * dt / 2)
        return total


def fd_wave_solve(g: MetricGraph, pulses: list[ControlPulse], T, h,
                  record_times: Optional[list[Fraction]] = None):
    """March the boundary-controlled wave to time T.

    Returns (final WaveField, snapshots) where snapshots[i] is the weighted
    node matrix at record_times[i]; controls run in parallel columns.
    """
    T, h = Fraction(T), Fraction(h)
    disc = DiscreteGraph(g, h)
    steps = T / h
    if steps.denominator != 1:
        raise ValueError("h must divide T")
    steps = int(steps)
    record_steps = {}
    if record_times:
        for i, s in enumerate(record_times):
            q = Fraction(s) / h
            if q.denominator != 1:
                raise ValueError("record times must sit on the time grid")
            record_steps.setdefault(int(q), []).append(i)
    ncols = len(pulses)
    cur = WaveField(disc, ncols)
    prev = WaveField(disc, ncols)
    controlled: dict[str, list[int]] = {}
    for k, p in enumerate(pulses):
        controlled.setdefault(p.gamma, []).append(k)
    snapshots: list[Optional[np.ndarray]] = [None] * (len(record_times or []))
    dt = float(h)

    def apply_bc(state: WaveField, n: int):
        t = n * dt
        for vid in g.boundary_vertices():
            eid, end = g.branches[vid][0]
            row = 0 if end == "tail" else disc.counts[eid]
            vals = np.zeros(ncols)
            for k in controlled.get(vid, ()):
                vals[k] = pulses[k].sample(t)
            state.u[eid][row] = vals

    apply_bc(cur, 0)
    if 0 in record_steps:
        snap = cur.as_vector()
        for i in record_steps[0]:
            snapshots[i] = snap
    for n in range(1, steps + 1):
        nxt = WaveField(disc, ncols)
        for eid, u in cur.u.items():
            nxt.u[eid][1:-1] = u[:-2] + u[2:] - prev.u[eid][1:-1]
        for vid, branches in g.branches.items():
            if g.vertices[vid].boundary:
                continue
            d = len(branches)
            acc = np.zeros(ncols)
            for eid, end in branches:
                neighbor = 1 if end == "tail" else disc.counts[eid] - 1
                acc += cur.u[eid][neighbor]
            val = (2.0 / d) * acc - prev.vertex_value(vid)
            for eid, end in branches:
                row = 0 if end == "tail" else disc.counts[eid]
                nxt.u[eid][row] = val
        apply_bc(nxt, n)
        prev, cur = cur, nxt
        if n in record_steps:
            snap = cur.as_vector()
            for i in record_steps[n]:
                snapshots[i] = snap
    return cur, snapshots


def hat_controls(gamma: str, T, h, spacing_steps: int = 2) -> list[ControlPulse]:
    """Delayed hats of width 4h covering [0, T] at grid resolution."""
    T, h = Fraction(T), Fraction(h)
    n = int(Fraction(T) / (spacing_steps * h))
    return [ControlPulse(gamma, k * spacing_steps * h, 4 * h) for k in range(max(n, 1))]


@dataclass
class NumericEikonal:
    """Factored numeric eikonal: E = sum_i coeff_i * U_i U_i^T.

    Built from reachable-subspace projectors on a time grid by Abel
    summation, so compressions never materialize the dense operator.
    """

    disc: DiscreteGraph
    factors: list[tuple[float, np.ndarray]]
    threshold_warnings: list[float] = field(default_factory=list)

    def compress(self, windows: np.ndarray) -> np.ndarray:
        out = np.zeros((windows.shape[1], windows.shape[1]))
        for coeff, u in self.factors:
            m = u.T @ windows
            out += coeff * (m.T @ m)
        return out

    def dense(self) -> np.ndarray:
        dim = self.factors[0][1].shape[0] if self.factors else 0
        out = np.zeros((dim, dim))
        for coeff, u in self.factors:
            out += coeff * (u @ u.T)
        return out


def numeric_eikonal(g: MetricGraph, gamma: str, T, h,
                    n_controls: Optional[int] = None,
                    s_step: Optional[Fraction] = None,
                    svd_threshold: float = 1e-6) -> NumericEikonal:
    """E = integral (s+1) dP^s from snapshots of delayed-pulse waves."""
    T, h = Fraction(T), Fraction(h)
    pulses = hat_controls(gamma, T, h)
    if n_controls is not None:
        pulses = pulses[:n_controls]
    if s_step is None:
        s_step = h * max(2, int(-(-T // (96 * h))))  # multiple of h, ~T/96
    if (Fraction(s_step) / h).denominator != 1:
        raise ValueError("s_step must be a multiple of h")
    n_grid = int(Fraction(T) / s_step)
    s_grid = [i * s_step for i in range(1, n_grid + 1)]
    _, snapshots = fd_wave_solve(g, pulses, T, h, record_times=s_grid)
    disc = DiscreteGraph(g, h)
    bases = []
    warnings = []
    for snap in snapshots:
        svals = np.linalg.svd(snap, compute_uv=False)
        top = svals[0] if svals.size and svals[0] > 0 else 1.0
        cut = svd_threshold * top
        near = np.sum((svals > 0.3 * cut) & (svals < 3 * cut))
        if near:
            warnings.append(float(top))
        u, s, _ = np.linalg.svd(snap, full_matrices=False)
        bases.append(u[:, s > cut])
    # E = sum_i (s_i + 1)(P_i - P_{i-1}) = sum_i (s_i - s_{i+1}) P_i + (s_n + 1) P_n
    factors = []
    for i, u in enumerate(bases):
        if i + 1 < len(bases):
            coeff = float(s_grid[i] - s_grid[i + 1])
        else:
            coeff = float(s_grid[i]) + 1.0
        factors.append((coeff, u))
    return NumericEikonal(disc, factors, warnings)


@dataclass
class CompareRow:
    family: int
    gamma: str
    r: Fraction
    eig_error: float
    angle: float


@dataclass
class OracleReport:
    rows: list[CompareRow]

    @property
    def max_eig_error(self) -> float:
        return max((row.eig_error for row in self.rows), default=0.0)

    @property
    def max_angle(self) -> float:
        return max((row.angle for row in self.rows), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["family", "gamma", "r", "eig_error", "subspace_angle"])
        for row in self.rows:
            writer.writerow([row.family, row.gamma, str(row.r),
                             f"{row.eig_error:.6e}", f"{row.angle:.6e}"])
        return buf.getvalue()


def _window_matrix(disc: DiscreteGraph, points, halfwidth_steps: int = 2) -> np.ndarray:
    """Normalized indicator windows around determination points, in the
    weighted coordinates used by the snapshots."""
    offsets = {}
    at = 0
    for eid in disc.graph.edges:
        offsets[eid] = at
        at += disc.counts[eid] + 1
    total = at
    cols = []
    for eid, x in points:
        j = float(x) / float(disc.h)
        center = int(round(j))
        vec = np.zeros(total)
        for k in range(center - halfwidth_steps, center + halfwidth_steps + 1):
            if 0 <= k <= disc.counts[eid]:
                w = disc.node_weight(eid, k)
                vec[offsets[eid] + k] = np.sqrt(w)
        vec /= np.linalg.norm(vec)
        cols.append(vec)
    return np.column_stack(cols)


def compare(form: SourceParametricForm, g: MetricGraph, gamma: str, T, h,
            r_fractions=(Fraction(1, 4), Fraction(1, 2), Fraction(3, 4)),
            numeric: Optional[NumericEikonal] = None) -> OracleReport:
    """Numeric eikonal compressed at determination points vs the exact form."""
    if numeric is None:
        numeric = numeric_eikonal(g, gamma, T, h)
    disc = numeric.disc
    rows = []
    margin = 4 * Fraction(h)
    for fam in form.families:
        for frac in r_fractions:
            r = fam.eps * frac
            if r <= margin or fam.eps - r <= margin:
                continue
            pts = []
            ok = True
            for c in fam.cells:
                x = c.position(r)
                snapped = Fraction(round(x / Fraction(h))) * Fraction(h)
                if snapped <= 0 or snapped >= g.edges[c.edge].length:
                    ok = False
                pts.append((c.edge, snapped))
            if not ok:
                continue
            windows = _window_matrix(disc, pts)
            numeric_block = numeric.compress(windows)
            exact = np.array([[float(x) for x in row]
                              for row in form.eikonal_matrix(fam.index, gamma, r)])
            ev_num = np.sort(np.linalg.eigvalsh(numeric_block))
            ev_exact = np.sort(np.linalg.eigvalsh(exact))
            eig_err = float(np.max(np.abs(ev_num - ev_exact)))
            angle = _subspace_angle(numeric_block, exact)
            rows.append(CompareRow(fam.index, gamma, r, eig_err, angle))
    return OracleReport(rows)


def _subspace_angle(numeric_block: np.ndarray, exact: np.ndarray) -> float:
    evals, evecs = np.linalg.eigh(exact)
    keep = evals > 0.5  # eikonal eigenvalues are >= 1; 0 is the kernel
    if not np.any(keep):
        return 0.0
    basis = evecs[:, keep]
    nvals, nvecs = np.linalg.eigh(numeric_block)
    order = np.argsort(nvals)[::-1]
    nbasis = nvecs[:, order[:basis.shape[1]]]
    sv = np.linalg.svd(basis.T @ nbasis, compute_uv=False)
    sv = np.clip(sv, -1.0, 1.0)
    return float(np.arccos(np.min(sv)))
