"""First canonical form: irreducible blocks and chain merging.

Within each family the projector set is partitioned by the transitive
closure of "not orthogonal" (exact integer dot products); each class spans
a kappa-dimensional subspace and generates the full kappa x kappa matrix
algebra.  Blocks whose boundary representations are equivalent are chained
and concatenated; the merged block keeps the first block's projectors and
extends its affine tau functions over the longer interval.

Connections are decided in two layers: an exact prefilter on per-source
eigenvalue multisets together with outward slopes (mismatched slopes would
force two tau ranges of one source to overlap beyond an endpoint, which the
source form forbids), then a floating-point orthogonal intertwiner on the
endpoint matrices and their r-derivatives.  Only the yes/no answer feeds
the merge; all merged data stays rational.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .matalg import AlgebraComponent, algebra_components, intertwiner, orthonormal_rows
from .rational import fmt_ratio, merge_intervals, parse_ratio
from .source_form import (EikonalTerm, FormError, SourceParametricForm,
                          _term_from_json, _term_to_json)


class ChainError(RuntimeError):
    """Chain structure inconsistent (ambiguous partner or a closed cycle)."""


@dataclass(frozen=True)
class NortClass:
    family_index: int
    members: tuple[tuple[str, int], ...]  # (gamma, term index) pairs
    kappa: int


def _exact_rank(vectors: list[tuple[int, ...]]) -> int:
    rows = [[Fraction(x) for x in v] for v in vectors]
    rank = 0
    cols = len(rows[0]) if rows else 0
    pivot_col = 0
    while rank < len(rows) and pivot_col < cols:
        pivot = next((i for i in range(rank, len(rows)) if rows[i][pivot_col] != 0), None)
        if pivot is None:
            pivot_col += 1
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        lead = rows[rank][pivot_col]
        for i in range(len(rows)):
            if i != rank and rows[i][pivot_col] != 0:
                factor = rows[i][pivot_col] / lead
                rows[i] = [a - factor * b for a, b in zip(rows[i], rows[rank])]
        rank += 1
        pivot_col += 1
    return rank


def nort_partition(form: SourceParametricForm, family_index: int) -> list[NortClass]:
    """Transitive closure of <beta, beta'> != 0 over the family's projectors."""
    fam = form.families[family_index]
    gamma_order = {gam: i for i, gam in enumerate(form.sigma)}
    refs = [(gam, i) for gam in sorted(fam.terms, key=gamma_order.get)
            for i in range(len(fam.terms[gam]))]
    parent = {ref: ref for ref in refs}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, r1 in enumerate(refs):
        b1 = fam.terms[r1[0]][r1[1]].beta
        for r2 in refs[i + 1:]:
            b2 = fam.terms[r2[0]][r2[1]].beta
            if sum(x * y for x, y in zip(b1, b2)) != 0:
                ra, rb = find(r1), find(r2)
                if ra != rb:
                    parent[rb] = ra
    classes: dict = {}
    for ref in refs:
        classes.setdefault(find(ref), []).append(ref)
    out = []
    for root in sorted(classes, key=lambda r: min(classes[r])):
        members = tuple(sorted(classes[root]))
        betas = [fam.terms[g][i].beta for g, i in members]
        out.append(NortClass(family_index, members, _exact_rank(betas)))
    return out


@dataclass
class ABlock:
    """One irreducible block of the source form, kappa x kappa over [0, eps].

    Exact data lives in the ambient family cell space (the beta vectors);
    `basis` is an orthonormal float basis of their span used only by the
    numeric equivalence machinery.
    """

    family_index: int
    eps: Fraction
    kappa: int
    m: int
    terms: dict[str, tuple[EikonalTerm, ...]]
    basis: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.basis is None:
            betas = [t.beta for terms in self.terms.values() for t in terms]
            self.basis = orthonormal_rows(betas)

    def flipped(self) -> "ABlock":
        terms = {
            gam: tuple(sorted(
                (EikonalTerm(-t.slope, t.t0 + t.slope * self.eps, t.beta, t.norm2)
                 for t in ts),
                key=lambda t: t.tau(self.eps / 2)))
            for gam, ts in self.terms.items()
        }
        return ABlock(self.family_index, self.eps, self.kappa, self.m, terms, self.basis)

    def _proj_in_basis(self, term: EikonalTerm) -> np.ndarray:
        b = self.basis @ np.array([float(x) for x in term.beta])
        return np.outer(b, b) / float(term.norm2)

    def value_matrix(self, gamma: str, r: Fraction) -> np.ndarray:
        out = np.zeros((self.kappa, self.kappa))
        for t in self.terms.get(gamma, ()):
            out += float(t.tau(r)) * self._proj_in_basis(t)
        return out

    def slope_matrix(self, gamma: str) -> np.ndarray:
        out = np.zeros((self.kappa, self.kappa))
        for t in self.terms.get(gamma, ()):
            out += float(t.slope) * self._proj_in_basis(t)
        return out


@dataclass
class BoundaryRep:
    """Per-source endpoint matrices of a block, with exact spectral data.

    `outward` carries Sum(slope * P) in the direction leaving the block
    through this end, so a junction pairs (value, s) with (value, -s).
    """

    side: str  # '-' or '+'
    kappa: int
    values: dict[str, np.ndarray]
    outward: dict[str, np.ndarray]
    exact_eigs: dict[str, tuple]         # sorted tau values padded with zeros
    exact_pairs: dict[str, tuple]        # sorted (tau value, outward slope)


def boundary_reps(block: ABlock, sigma) -> tuple[BoundaryRep, BoundaryRep]:
    reps = []
    for side, r, sgn in (("-", Fraction(0), -1), ("+", block.eps, 1)):
        values, outward, eigs, pairs = {}, {}, {}, {}
        for gamma in sigma:
            ts = block.terms.get(gamma, ())
            values[gamma] = block.value_matrix(gamma, r)
            outward[gamma] = sgn * block.slope_matrix(gamma)
            vals = sorted([t.tau(r) for t in ts] + [Fraction(0)] * (block.kappa - len(ts)))
            eigs[gamma] = tuple(vals)
            pairs[gamma] = tuple(sorted((t.tau(r), sgn * t.slope) for t in ts))
        reps.append(BoundaryRep(side, block.kappa, values, outward, eigs, pairs))
    return reps[0], reps[1]


@dataclass
class Intertwiner:
    matrix: np.ndarray

    def check(self, a_mats, b_mats, tol=1e-9) -> float:
        return max(float(np.max(np.abs(self.matrix @ a - b @ self.matrix)))
                   for a, b in zip(a_mats, b_mats))


@dataclass
class Rejection:
    reason: str
    gamma: Optional[str] = None
    word: Optional[tuple[str, ...]] = None


def _exact_word_trace(block: ABlock, r: Fraction, word: tuple[str, ...]) -> Fraction:
    """Exact trace of a product of endpoint matrices, via ambient rationals."""
    mats = {}
    for gamma in set(word):
        m = [[Fraction(0)] * block.m for _ in range(block.m)]
        for t in block.terms.get(gamma, ()):
            tau = t.tau(r)
            for i in range(block.m):
                if t.beta[i] == 0:
                    continue
                for j in range(block.m):
                    if t.beta[j] != 0:
                        m[i][j] += tau * Fraction(t.beta[i] * t.beta[j], t.norm2)
        mats[gamma] = m
    prod = mats[word[0]]
    for gamma in word[1:]:
        nxt = mats[gamma]
        prod = [[sum(prod[i][k] * nxt[k][j] for k in range(block.m))
                 for j in range(block.m)] for i in range(block.m)]
    return sum(prod[i][i] for i in range(block.m))


def _trace_certificate(block_a: ABlock, r_a, block_b: ABlock, r_b, sigma,
                       max_len: int, budget: int = 4096) -> Optional[tuple[str, ...]]:
    words: list[tuple[str, ...]] = [(gamma,) for gamma in sigma]
    count = 0
    while words and count < budget:
        next_words = []
        for word in words:
            count += 1
            if count > budget:
                break
            if _exact_word_trace(block_a, r_a, word) != _exact_word_trace(block_b, r_b, word):
                return word
            if len(word) < max_len:
                next_words.extend(word + (gamma,) for gamma in sigma)
        words = next_words
    return None


def equivalent(rep_a: BoundaryRep, rep_b: BoundaryRep, sigma,
               with_slopes: bool = False, tol: float = 1e-9):
    """Orthogonal Y with Y rho(E_gamma) = rho'(E_gamma) Y, or a rejection.

    Returns (Intertwiner | None, Rejection | None).  With `with_slopes` the
    outward derivative matrices must be intertwined with opposite sign,
    which is the condition for gluing two interval ends together.
    """
    if rep_a.kappa != rep_b.kappa:
        return None, Rejection("dimension mismatch")
    for gamma in sigma:
        if rep_a.exact_eigs[gamma] != rep_b.exact_eigs[gamma]:
            return None, Rejection("eigenvalue multiset mismatch", gamma=gamma)
    if with_slopes:
        for gamma in sigma:
            flipped = tuple(sorted((v, -s) for v, s in rep_b.exact_pairs[gamma]))
            if rep_a.exact_pairs[gamma] != flipped:
                return None, Rejection("slope pairing mismatch", gamma=gamma)
    a_mats = [rep_a.values[g] for g in sigma]
    b_mats = [rep_b.values[g] for g in sigma]
    if with_slopes:
        a_mats += [rep_a.outward[g] for g in sigma]
        b_mats += [-rep_b.outward[g] for g in sigma]
    if rep_a.kappa == 1:
        return Intertwiner(np.eye(1)), None
    y = intertwiner(a_mats, b_mats, tol=tol)
    if y is None:
        return None, Rejection("no orthogonal intertwiner")
    return Intertwiner(y), None


@dataclass
class EndData:
    """Boundary data of a merged block at one end."""

    side: str
    exact_eigs: dict[str, tuple]
    component_sizes: list[int]
    component_mults: list[int]
    components: list[AlgebraComponent] = field(repr=False, default_factory=list)


@dataclass
class MergedBlock:
    eps: Fraction
    kappa: int
    m: int
    base_family: int
    terms: dict[str, tuple[EikonalTerm, ...]]
    ends: dict[str, EndData] = field(default_factory=dict)

    def as_ablock(self) -> ABlock:
        return ABlock(self.base_family, self.eps, self.kappa, self.m, self.terms)

    def tau_sets(self, gamma: str, r: Fraction) -> set:
        return {t.tau(r) for t in self.terms.get(gamma, ())}


@dataclass
class CanonicalFormA:
    sigma: tuple[str, ...]
    horizon: Fraction
    blocks: list[MergedBlock]

    def tau_ranges(self, gamma: str):
        return [t.tau_range(b.eps) for b in self.blocks for t in b.terms.get(gamma, ())]

    def verify(self, source: Optional[SourceParametricForm] = None):
        for block in self.blocks:
            minus, plus = boundary_reps(block.as_ablock(), self.sigma)
            if all(minus.exact_eigs[g] == plus.exact_eigs[g] for g in self.sigma):
                raise FormError("merged block has equivalent endpoint spectra")
        for i, b1 in enumerate(self.blocks):
            r1 = boundary_reps(b1.as_ablock(), self.sigma)
            for b2 in self.blocks[i + 1:]:
                r2 = boundary_reps(b2.as_ablock(), self.sigma)
                for ra in r1:
                    for rb in r2:
                        y, _ = equivalent(ra, rb, self.sigma, with_slopes=True)
                        if y is not None:
                            raise FormError("connectable blocks remain after merging")
        if source is not None:
            for gamma in self.sigma:
                if merge_intervals(self.tau_ranges(gamma)) != \
                        merge_intervals(source.tau_ranges(gamma)):
                    raise FormError(f"spectrum of {gamma} changed by merging")


def build_blocks(form: SourceParametricForm) -> list[ABlock]:
    blocks = []
    for fam in form.families:
        for cls in nort_partition(form, fam.index):
            terms = {}
            for gamma, idx in cls.members:
                terms.setdefault(gamma, []).append(fam.terms[gamma][idx])
            terms = {g: tuple(sorted(ts, key=lambda t: t.tau(fam.eps / 2)))
                     for g, ts in terms.items()}
            blocks.append(ABlock(fam.index, fam.eps, cls.kappa, fam.size, terms))
    return blocks


def _match_ends(blocks: list[ABlock], sigma):
    reps = {}
    for i, block in enumerate(blocks):
        minus, plus = boundary_reps(block, sigma)
        reps[(i, "-")] = minus
        reps[(i, "+")] = plus
    partner: dict[tuple[int, str], tuple[int, str]] = {}
    ends = sorted(reps)
    for a in ends:
        for b in ends:
            if b <= a or a[0] == b[0]:
                continue
            y, _ = equivalent(reps[a], reps[b], sigma, with_slopes=True)
            if y is None:
                continue
            for end in (a, b):
                if end in partner:
                    raise ChainError(
                        f"end {end} is equivalent to two distinct partners")
            partner[a] = b
            partner[b] = a
    return partner


def _chains(blocks: list[ABlock], partner) -> list[list[tuple[int, bool]]]:
    """Split blocks into chains of (index, flipped) in traversal order."""
    links: dict[int, dict[str, tuple[int, str]]] = {}
    for (i, s), (j, t) in partner.items():
        links.setdefault(i, {})[s] = (j, t)
    chains = []
    seen: set[int] = set()
    for start in range(len(blocks)):
        if start in seen:
            continue
        sides = links.get(start, {})
        free = [s for s in ("-", "+") if s not in sides]
        if not free:
            if start not in seen:
                raise ChainError("blocks form a closed cycle")
            continue
        entry = free[0]
        chain = []
        node, enter = start, entry
        while True:
            seen.add(node)
            chain.append((node, enter == "+"))
            exit_side = "+" if enter == "-" else "-"
            nxt = links.get(node, {}).get(exit_side)
            if nxt is None:
                break
            node, enter = nxt
            if node in seen:
                raise ChainError("blocks form a closed cycle")
        chains.append(chain)
    return chains


def _merge_chain(blocks: list[ABlock], chain: list[tuple[int, bool]], sigma) -> MergedBlock:
    oriented = [blocks[i].flipped() if flip else blocks[i] for i, flip in chain]
    first = oriented[0]
    total = sum((b.eps for b in oriented), Fraction(0))
    offset = first.eps
    for b in oriented[1:]:
        # the junction must continue every tau affinely
        for gamma in sigma:
            ext = sorted((t.tau(offset), t.slope) for t in first.terms.get(gamma, ()))
            nxt = sorted((t.tau(Fraction(0)), t.slope) for t in b.terms.get(gamma, ()))
            if ext != nxt:
                raise ChainError(f"tau functions of {gamma} do not extend across a junction")
        offset += b.eps
    return MergedBlock(total, first.kappa, first.m, first.family_index,
                       dict(first.terms))


def _canonical_orient(block: MergedBlock) -> MergedBlock:
    def key(r: Fraction):
        return sorted(float(t.tau(r)) for ts in block.terms.values() for t in ts)

    if key(block.eps) < key(Fraction(0)):
        flipped = block.as_ablock().flipped()
        return MergedBlock(block.eps, block.kappa, block.m, block.base_family,
                           flipped.terms)
    return block


def _attach_end_data(block: MergedBlock, sigma):
    ab = block.as_ablock()
    minus, plus = boundary_reps(ab, sigma)
    for rep in (minus, plus):
        comps = algebra_components([rep.values[g] for g in sigma])
        block.ends[rep.side] = EndData(
            rep.side, rep.exact_eigs,
            [c.kappa for c in comps], [c.multiplicity for c in comps], comps)


def merge_chains(blocks: list[ABlock], sigma, horizon,
                 source: Optional[SourceParametricForm] = None) -> CanonicalFormA:
    partner = _match_ends(blocks, sigma)
    merged = [_canonical_orient(_merge_chain(blocks, chain, sigma))
              for chain in _chains(blocks, partner)]
    gamma_order = {g: i for i, g in enumerate(sigma)}

    def block_key(b: MergedBlock):
        sig = []
        for gamma in sigma:
            sig.append(tuple((t.t0, t.slope, t.beta) for t in b.terms.get(gamma, ())))
        return (b.eps, b.kappa, tuple(sig))

    merged.sort(key=block_key)
    form = CanonicalFormA(tuple(sigma), Fraction(horizon), merged)
    for block in merged:
        _attach_end_data(block, sigma)
    form.verify(source)
    return form


def canonical_form_a(form: SourceParametricForm) -> CanonicalFormA:
    return merge_chains(build_blocks(form), form.sigma, form.horizon, source=form)


# -- serialization ------------------------------------------------------------

def canon_a_to_json(canon: CanonicalFormA) -> dict:
    return {
        "stage": "canon-a",
        "sigma": list(canon.sigma),
        "horizon": fmt_ratio(canon.horizon),
        "blocks": [
            {
                "eps": fmt_ratio(b.eps),
                "kappa": b.kappa,
                "cells": b.m,
                "base_family": b.base_family,
                "terms": {g: [_term_to_json(t) for t in ts]
                          for g, ts in sorted(b.terms.items())},
                "boundary": {
                    side: {
                        "eigenvalues": {g: [fmt_ratio(v) for v in end.exact_eigs[g]]
                                        for g in sorted(end.exact_eigs)},
                        "component_sizes": end.component_sizes,
                        "component_multiplicities": end.component_mults,
                    }
                    for side, end in sorted(b.ends.items())
                },
            }
            for b in canon.blocks
        ],
    }


def canon_a_from_json(data: dict) -> CanonicalFormA:
    if data.get("stage") != "canon-a":
        raise FormError(f"not a canon-a artifact: stage={data.get('stage')!r}")
    sigma = tuple(data["sigma"])
    blocks = []
    for bd in data["blocks"]:
        terms = {g: tuple(_term_from_json(t) for t in ts)
                 for g, ts in bd["terms"].items()}
        block = MergedBlock(parse_ratio(bd["eps"]), bd["kappa"], bd["cells"],
                            bd["base_family"], terms)
        _attach_end_data(block, sigma)
        blocks.append(block)
    form = CanonicalFormA(sigma, parse_ratio(data["horizon"]), blocks)
    form.verify()
    return form
