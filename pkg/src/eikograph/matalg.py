"""Floating-point helpers for finite-dimensional operator algebras.

All combinatorial decisions in the pipeline are exact; this module only
supplies the pieces that are genuinely irrational: orthonormal bases,
orthogonal intertwiners between representations, and block decompositions
of algebras generated by symmetric matrices.  Random draws use a fixed
seed so repeated runs are byte-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

DEFAULT_TOL = 1e-9


def orthonormal_rows(vectors: Sequence[Sequence[Fraction]]) -> np.ndarray:
    """Gram-Schmidt in the given order, dropping dependent rows.

    Sign convention: first entry of largest magnitude is positive, so the
    result is deterministic.
    """
    rows = []
    for vec in vectors:
        v = np.array([float(x) for x in vec], dtype=float)
        for b in rows:
            v = v - (v @ b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            v = v / norm
            lead = np.argmax(np.abs(v))
            if v[lead] < 0:
                v = -v
            rows.append(v)
    if not rows:
        return np.zeros((0, len(vectors[0]) if vectors else 0))
    return np.vstack(rows)


def span_dim(mats: Sequence[np.ndarray], tol: float = 1e-9) -> int:
    if not mats:
        return 0
    flat = np.vstack([m.reshape(1, -1) for m in mats])
    svals = np.linalg.svd(flat, compute_uv=False)
    if svals.size == 0:
        return 0
    return int(np.sum(svals > tol * max(1.0, svals[0])))


def word_closure(mats: Sequence[np.ndarray], tol: float = 1e-9,
                 max_dim: Optional[int] = None) -> list[np.ndarray]:
    """Orthonormal basis (as matrices) of the span of all words in `mats`."""
    if not mats:
        return []
    n = mats[0].shape[0]
    cap = max_dim if max_dim is not None else n * n
    basis: list[np.ndarray] = []

    def absorb(m: np.ndarray) -> bool:
        v = m.reshape(-1).astype(float)
        for b in basis:
            v = v - (v @ b.reshape(-1)) * b.reshape(-1)
        norm = np.linalg.norm(v)
        if norm > tol:
            basis.append((v / norm).reshape(n, n))
            return True
        return False

    frontier = []
    for m in mats:
        if absorb(m):
            frontier.append(m)
    while frontier and len(basis) < cap:
        new_frontier = []
        for w in frontier:
            for m in mats:
                prod = w @ m
                if absorb(prod):
                    new_frontier.append(prod)
                if len(basis) >= cap:
                    break
            if len(basis) >= cap:
                break
        frontier = new_frontier
    return basis


def word_closure_dim(mats: Sequence[np.ndarray], tol: float = 1e-9) -> int:
    return len(word_closure(mats, tol))


def _nullspace(system: np.ndarray, tol: float) -> np.ndarray:
    if system.size == 0:
        return np.eye(system.shape[1])
    _, svals, vt = np.linalg.svd(system)
    scale = svals[0] if svals.size and svals[0] > 0 else 1.0
    rank = int(np.sum(svals > tol * scale))
    return vt[rank:].T


def intertwiner(a_mats: Sequence[np.ndarray], b_mats: Sequence[np.ndarray],
                tol: float = DEFAULT_TOL) -> Optional[np.ndarray]:
    """Orthogonal Y with Y A_g = B_g Y for all g, or None.

    The space of intertwiners is the nullspace of a linear system; for
    *-closed tuples an invertible intertwiner exists iff an orthogonal one
    does (polar decomposition stays inside the space), and invertible
    elements are generic in the nullspace when present.
    """
    assert len(a_mats) == len(b_mats)
    if not a_mats:
        return None
    n = a_mats[0].shape[0]
    if any(m.shape != (n, n) for m in list(a_mats) + list(b_mats)):
        return None
    blocks = []
    eye = np.eye(n)
    for A, B in zip(a_mats, b_mats):
        # vec(Y A - B Y) = (A^T (x) I - I (x) B) vec(Y)
        blocks.append(np.kron(A.T, eye) - np.kron(eye, B))
    basis = _nullspace(np.vstack(blocks), 1e-10)
    if basis.shape[1] == 0:
        return None
    rng = np.random.default_rng(0)
    best = None
    for trial in range(basis.shape[1] + 8):
        if trial < basis.shape[1]:
            coeff = np.zeros(basis.shape[1])
            coeff[trial] = 1.0
        else:
            coeff = rng.standard_normal(basis.shape[1])
        cand = (basis @ coeff).reshape(n, n)
        smin = np.linalg.svd(cand, compute_uv=False)[-1]
        if best is None or smin > best[0]:
            best = (smin, cand)
    if best[0] < 1e-7:
        return None
    u, _, vt = np.linalg.svd(best[1])
    y = u @ vt
    err = max(np.max(np.abs(y @ A - B @ y)) for A, B in zip(a_mats, b_mats))
    if err > tol * max(1.0, max(np.max(np.abs(A)) for A in a_mats)):
        return None
    return y


@dataclass
class AlgebraComponent:
    """Minimal two-sided block of a symmetric-matrix algebra on R^n.

    `support` spans the component's invariant subspace (columns,
    orthonormal); the block algebra is M^kappa with the given multiplicity,
    and `irrep` picks one copy for functional-model evaluation.
    """

    support: np.ndarray
    kappa: int
    multiplicity: int
    irrep: np.ndarray


def algebra_components(mats: Sequence[np.ndarray], tol: float = 1e-8) -> list[AlgebraComponent]:
    """Decompose the algebra generated by symmetric matrices into blocks.

    Returns one entry per minimal ideal, ordered deterministically by
    (smallest eigenvalue signature of the generators on the component).
    """
    mats = [np.asarray(m, dtype=float) for m in mats]
    if not mats:
        return []
    n = mats[0].shape[0]
    gram = sum(m @ m for m in mats)
    evals, evecs = np.linalg.eigh(gram)
    keep = evals > tol * max(1.0, evals[-1])
    if not np.any(keep):
        return []
    supp = evecs[:, keep]
    reduced = [supp.T @ m @ supp for m in mats]
    basis = word_closure(reduced, tol=1e-10)
    k = supp.shape[1]
    # center: elements sum_i c_i basis_i commuting with every generator
    columns = []
    for b in basis:
        col = np.concatenate([(b @ m - m @ b).reshape(-1) for m in reduced])
        columns.append(col)
    coeff_null = _nullspace(np.column_stack(columns), 1e-10)
    centers = [sum(c * b for c, b in zip(col, basis)) for col in coeff_null.T]
    if not centers:
        centers = [np.eye(k)]
    rng = np.random.default_rng(1)
    groups = [np.arange(k)]
    for _ in range(16):
        z = sum(rng.standard_normal() * (c + c.T) / 2 for c in centers)
        zevals, zevecs = np.linalg.eigh(z)
        groups = _group_close(zevals, 1e-7 * max(1.0, np.max(np.abs(zevals))))
        if len(groups) == len(centers):
            break
    comps = []
    for idx in groups:
        sub = supp @ zevecs[:, idx]
        sub_mats = [sub.T @ m @ sub for m in mats]
        d = word_closure_dim(sub_mats, tol=1e-9)
        kappa = int(round(np.sqrt(d)))
        mult = sub.shape[1] // max(kappa, 1)
        irrep = _minimal_invariant(sub_mats, kappa)
        comps.append(AlgebraComponent(sub, kappa, mult, sub @ irrep))
    comps.sort(key=lambda c: _component_key(mats, c))
    return comps


def _group_close(values: np.ndarray, tol: float) -> list[np.ndarray]:
    groups = []
    start = 0
    for i in range(1, len(values) + 1):
        if i == len(values) or values[i] - values[i - 1] > tol:
            groups.append(np.arange(start, i))
            start = i
    return groups


def _minimal_invariant(mats: Sequence[np.ndarray], kappa: int) -> np.ndarray:
    """Orthonormal basis of one irreducible invariant subspace."""
    k = mats[0].shape[0]
    if kappa >= k:
        return np.eye(k)
    basis = word_closure(mats, tol=1e-10)
    rows = []
    for m in mats:
        eye = np.eye(k)
        rows.append(np.kron(m.T, eye) - np.kron(eye, m))
    comm_basis = _nullspace(np.vstack(rows), 1e-10)
    rng = np.random.default_rng(2)
    for _ in range(16):
        c = sum(rng.standard_normal() * comm_basis[:, i].reshape(k, k)
                for i in range(comm_basis.shape[1]))
        c = (c + c.T) / 2
        evals, evecs = np.linalg.eigh(c)
        groups = _group_close(evals, 1e-7 * max(1.0, np.max(np.abs(evals))))
        for idx in groups:
            if len(idx) == kappa:
                return evecs[:, idx]
    return np.eye(k)[:, :kappa]


def _component_key(mats: Sequence[np.ndarray], comp: AlgebraComponent):
    sig = []
    for m in mats:
        block = comp.irrep.T @ m @ comp.irrep
        sig.extend(np.round(np.sort(np.linalg.eigvalsh(block)), 6).tolist())
    return (len(sig), sig)
