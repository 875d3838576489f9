"""Two-species Fermionic composites and downfolding of one species.

Operators of species A and B commute, so composite matrices are Kronecker
products of species matrices with no cross-species sign.  Composite
determinants are ordered A-major: index ``iA * dim_B + iB``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
import scipy.linalg

from .ccsolver import (DEFAULT_MAX_ITER, DEFAULT_TOL, ClusterOperator, MaskedEquations,
                       _check_denominators, excitation_signatures, fock_denominator)
from .ducc import symmetrize_checked
from .fockspace import (DenseOperator, DeterminantSpace, MAX_DIMENSION, DimensionCapError, Signature,
                        build_matrix, enumerate_space, excitation_cache, string_matrix)
from .integrals import BareHamiltonian, IntegralSet, SpinOrbitalBasis, build_fock, to_spinorbital
from .ses import EffectiveHamiltonian

log = logging.getLogger(__name__)

JointSignature = tuple[Signature, Signature]


@dataclass(frozen=True)
class CompositeBasis:
    basis_A: SpinOrbitalBasis
    basis_B: SpinOrbitalBasis


def composite_reference(cb: CompositeBasis) -> tuple[int, int]:
    return cb.basis_A.reference_mask, cb.basis_B.reference_mask


def fock_space(basis: SpinOrbitalBasis) -> DeterminantSpace:
    """Every occupation pattern of the species (all particle numbers)."""
    n = basis.n_spinorb
    if 2 ** n > MAX_DIMENSION:
        raise DimensionCapError(f"Fock space of {n} spin orbitals exceeds the cap")
    return DeterminantSpace(n, basis.n_elec, basis.reference_mask, tuple(range(2 ** n)), "fock")


@dataclass(frozen=True)
class CompositeSpace:
    space_A: DeterminantSpace
    space_B: DeterminantSpace

    def __len__(self):
        return len(self.space_A) * len(self.space_B)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return itertools.product(self.space_A.determinants, self.space_B.determinants)

    def position(self, det_A: int, det_B: int) -> int:
        return self.space_A.index[det_A] * len(self.space_B) + self.space_B.index[det_B]

    @property
    def reference_index(self) -> int:
        return self.position(self.space_A.reference, self.space_B.reference)

    def a_sector(self) -> np.ndarray:
        """Positions of (any A determinant) x (B reference)."""
        return np.arange(len(self.space_A)) * len(self.space_B) + self.space_B.reference_index


def composite_space(cb: CompositeBasis, fock: bool = False) -> CompositeSpace:
    if fock:
        return CompositeSpace(fock_space(cb.basis_A), fock_space(cb.basis_B))
    space = CompositeSpace(enumerate_space(cb.basis_A), enumerate_space(cb.basis_B))
    if len(space) > MAX_DIMENSION:
        raise DimensionCapError(f"composite space of {len(space)} exceeds the cap")
    return space


@dataclass(frozen=True)
class CompositeHamiltonian:
    """``H_A + H_B + sum v[a, a', b, b'] a+_a a_a' b+_b b_b'``."""
    h_A: BareHamiltonian
    h_B: BareHamiltonian
    v_AB: np.ndarray

    def __post_init__(self):
        nA, nB = self.h_A.basis.n_spinorb, self.h_B.basis.n_spinorb
        if self.v_AB.shape != (nA, nA, nB, nB):
            raise ValueError(f"v_AB must have shape {(nA, nA, nB, nB)}")
        if np.abs(self.v_AB - self.v_AB.transpose(1, 0, 3, 2)).max(initial=0.0) > 1e-12:
            raise ValueError("v_AB is not Hermitian")
        self.v_AB.setflags(write=False)

    @property
    def basis(self) -> CompositeBasis:
        return CompositeBasis(self.h_A.basis, self.h_B.basis)


def _dense(triple, n: int) -> np.ndarray:
    r, c, s = triple
    M = np.zeros((n, n))
    M[r, c] = s
    return M


def _one_body_strings(space: DeterminantSpace):
    n = space.n_spinorb
    return {(p, q): _dense(string_matrix([(p, True), (q, False)], space, project=True), len(space))
            for p in range(n) for q in range(n) if p % 2 == q % 2}


def build_composite_matrix(ch: CompositeHamiltonian, space: CompositeSpace):
    HA = build_matrix(ch.h_A, space.space_A).matrix
    HB = build_matrix(ch.h_B, space.space_B).matrix
    IA, IB = np.eye(len(space.space_A)), np.eye(len(space.space_B))
    M = np.kron(HA, IB) + np.kron(IA, HB)
    EA = _one_body_strings(space.space_A)
    EB = _one_body_strings(space.space_B)
    for (a, a2), ea in EA.items():
        for (b, b2), eb in EB.items():
            val = ch.v_AB[a, a2, b, b2]
            if val:
                M += val * np.kron(ea, eb)
    return M


def number_operators(space: CompositeSpace) -> tuple[np.ndarray, np.ndarray]:
    nA = np.array([bin(d).count("1") for d in space.space_A.determinants], dtype=float)
    nB = np.array([bin(d).count("1") for d in space.space_B.determinants], dtype=float)
    return (np.kron(np.diag(nA), np.eye(len(nB))), np.kron(np.eye(len(nA)), np.diag(nB)))


def composite_fci(ch: CompositeHamiltonian) -> float:
    M = build_composite_matrix(ch, composite_space(ch.basis))
    return float(np.linalg.eigvalsh(M)[0])


# ---------------------------------------------------------------------------
# model generator
# ---------------------------------------------------------------------------

def hubbard_species(n_sites: int, n_particles: int, hopping: float, onsite: float):
    """Open-chain Hubbard species in the basis of its hopping eigenvectors.

    Returns the molecular-orbital integrals and the site-to-MO coefficients.
    """
    h_site = np.zeros((n_sites, n_sites))
    for s in range(n_sites - 1):
        h_site[s, s + 1] = h_site[s + 1, s] = -hopping
    _, C = np.linalg.eigh(h_site)
    for k in range(n_sites):
        if C[np.argmax(np.abs(C[:, k])), k] < 0:
            C[:, k] *= -1
    eri_site = np.zeros((n_sites,) * 4)
    for s in range(n_sites):
        eri_site[s, s, s, s] = onsite
    h_mo = C.T @ h_site @ C
    eri_mo = np.einsum("pqrs,pi,qj,rk,sl->ijkl", eri_site, C, C, C, C)
    return IntegralSet(n_sites, n_particles, 0, 0.0, h_mo, eri_mo, {"model": "hubbard"}), C


def hubbard_pair(n_sites: int = 2, n_A: int = 2, n_B: int = 2, hopping_A: float = 1.0,
                 onsite_A: float = 2.0, hopping_B: float = 0.8, onsite_B: float = 1.5,
                 coupling: float | list = 0.3) -> CompositeHamiltonian:
    """Two Hubbard species coupled site by site through ``W_s n^A_s n^B_s``."""
    ints_A, CA = hubbard_species(n_sites, n_A, hopping_A, onsite_A)
    ints_B, CB = hubbard_species(n_sites, n_B, hopping_B, onsite_B)
    W = np.broadcast_to(np.asarray(coupling, dtype=float), (n_sites,))
    # site density in spin-orbital MO indices: D_s[p, q] = C[s, p/2] C[s, q/2] delta_spin
    def densities(C):
        idx = np.arange(2 * n_sites) // 2
        same = (np.arange(2 * n_sites)[:, None] % 2) == (np.arange(2 * n_sites)[None, :] % 2)
        return [np.outer(C[s, idx], C[s, idx]) * same for s in range(n_sites)]
    DA, DB = densities(CA), densities(CB)
    v = sum(W[s] * np.einsum("pq,rs->pqrs", DA[s], DB[s]) for s in range(n_sites))
    return CompositeHamiltonian(to_spinorbital(ints_A), to_spinorbital(ints_B), np.array(v))


# ---------------------------------------------------------------------------
# composite coupled cluster
# ---------------------------------------------------------------------------

@dataclass
class CompositeCluster:
    t_A: ClusterOperator
    t_B: ClusterOperator
    s_AB: dict[JointSignature, float] = field(default_factory=dict)

    def __post_init__(self):
        for sa, sb in self.s_AB:
            if not (sa[0] and sb[0]):
                raise ValueError("joint amplitudes must excite both species")

    def items(self):
        for s, t in self.t_A.items():
            yield ("A", s), t
        for s, t in self.t_B.items():
            yield ("B", s), t
        for s, t in self.s_AB.items():
            yield ("AB", s), t


@dataclass(frozen=True)
class CompositeMask:
    sigs_A: tuple
    sigs_B: tuple
    sigs_AB: tuple

    @classmethod
    def full(cls, cb: CompositeBasis, joint: bool = True) -> "CompositeMask":
        A = excitation_signatures(cb.basis_A, cb.basis_A.n_occ)
        B = excitation_signatures(cb.basis_B, cb.basis_B.n_occ)
        AB = list(itertools.product(A, B)) if joint else []
        return cls(tuple(A), tuple(B), tuple(AB))

    def __len__(self):
        return len(self.sigs_A) + len(self.sigs_B) + len(self.sigs_AB)

    def labels(self) -> list:
        return ([("A", s) for s in self.sigs_A] + [("B", s) for s in self.sigs_B]
                + [("AB", s) for s in self.sigs_AB])


def composite_fock(ch: CompositeHamiltonian) -> tuple[np.ndarray, np.ndarray, float]:
    """Species Fock matrices including the inter-species mean field, and the reference energy."""
    occA, occB = list(ch.h_A.basis.occupied), list(ch.h_B.basis.occupied)
    fA = build_fock(ch.h_A).f + np.einsum("pqbb->pq", ch.v_AB[:, :, occB][:, :, :, occB])
    fB = build_fock(ch.h_B).f + np.einsum("aapq->pq", ch.v_AB[occA][:, occA])
    e_ref = (build_fock(ch.h_A).reference_energy + build_fock(ch.h_B).reference_energy
             + np.einsum("aabb->", ch.v_AB[np.ix_(occA, occA, occB, occB)]))
    return fA, fB, float(e_ref)


def _kron_sparse(a, nA: int, b, nB: int):
    """Sparse product of species generators; ``None`` stands for the identity."""
    if a is None:
        a = (np.arange(nA), np.arange(nA), np.ones(nA))
    if b is None:
        b = (np.arange(nB), np.arange(nB), np.ones(nB))
    ra, ca, sa = a
    rb, cb, sb = b
    rows = (ra[:, None] * nB + rb[None, :]).ravel()
    cols = (ca[:, None] * nB + cb[None, :]).ravel()
    return rows, cols, (sa[:, None] * sb[None, :]).ravel()


class CompositeContext:
    def __init__(self, ch: CompositeHamiltonian):
        self.ch = ch
        self.space = composite_space(ch.basis)
        self.hmat = build_composite_matrix(ch, self.space)
        self.cacheA = excitation_cache(self.space.space_A)
        self.cacheB = excitation_cache(self.space.space_B)
        fA, fB, self.reference_energy = composite_fock(ch)
        self.epsA, self.epsB = np.diag(fA).copy(), np.diag(fB).copy()

    def generator(self, label):
        nA, nB = len(self.space.space_A), len(self.space.space_B)
        kind, sig = label
        if kind == "A":
            return _kron_sparse(self.cacheA.get(sig), nA, None, nB)
        if kind == "B":
            return _kron_sparse(None, nA, self.cacheB.get(sig), nB)
        return _kron_sparse(self.cacheA.get(sig[0]), nA, self.cacheB.get(sig[1]), nB)

    def denominator(self, label) -> float:
        kind, sig = label
        if kind == "A":
            return fock_denominator(sig, self.epsA)
        if kind == "B":
            return fock_denominator(sig, self.epsB)
        return fock_denominator(sig[0], self.epsA) + fock_denominator(sig[1], self.epsB)

    def t_matrix(self, cluster: CompositeCluster, parts=("A", "B", "AB")) -> np.ndarray:
        M = np.zeros((len(self.space), len(self.space)))
        for label, t in cluster.items():
            if label[0] in parts and t:
                r, c, s = self.generator(label)
                np.add.at(M, (r, c), t * s)
        return M


@dataclass
class CompositeCCResult:
    cluster: CompositeCluster
    energy: float
    residual_norm: float
    iterations: int
    converged: bool

    def __iter__(self):
        return iter((self.cluster, self.energy))


def solve_cc_composite(ch: CompositeHamiltonian, mask: CompositeMask, tol: float = DEFAULT_TOL,
                       max_iter: int = DEFAULT_MAX_ITER) -> CompositeCCResult:
    if not len(mask):
        raise ValueError("composite amplitude mask is empty")
    ctx = CompositeContext(ch)
    labels = mask.labels()
    denoms = np.array([ctx.denominator(l) for l in labels])
    _check_denominators([l[1] for l in labels], denoms)
    eqs = MaskedEquations(ctx.hmat, ctx.space.reference_index,
                          [ctx.generator(l) for l in labels], denoms, labels)
    t, e, rnorm, it, ok, _ = eqs.solve(tol=tol, max_iter=max_iter)
    if not ok:
        log.warning("composite CC did not converge in %d iterations (|R| = %.3e)", it, rnorm)
    amps = dict(zip(labels, t))
    bA, bB = ch.h_A.basis, ch.h_B.basis
    cluster = CompositeCluster(
        ClusterOperator(bA, {s: amps[("A", s)] for s in mask.sigs_A}, bA.n_occ),
        ClusterOperator(bB, {s: amps[("B", s)] for s in mask.sigs_B}, bB.n_occ),
        {s: amps[("AB", s)] for s in mask.sigs_AB})
    return CompositeCCResult(cluster, e, rnorm, it, ok)


# ---------------------------------------------------------------------------
# downfolding species B
# ---------------------------------------------------------------------------

def _a_operator(ctx: CompositeContext, block: np.ndarray, hermitian: bool, prov: dict):
    sA = ctx.space.space_A
    return EffectiveHamiltonian(None, sA, DenseOperator(sA, block, prov), hermitian, prov)


def _external(ch, t_B: ClusterOperator, s_AB: Mapping) -> tuple[CompositeContext, np.ndarray]:
    ctx = CompositeContext(ch)
    empty_A = ClusterOperator(ch.h_A.basis, {}, ch.h_A.basis.n_occ)
    return ctx, ctx.t_matrix(CompositeCluster(empty_A, t_B, dict(s_AB)), ("B", "AB"))


def downfold_B(ch: CompositeHamiltonian, t_B: ClusterOperator, s_AB: Mapping) -> EffectiveHamiltonian:
    """``e^{-(T_B+S_AB)} H e^{T_B+S_AB}`` on (A determinants) x (B reference)."""
    ctx, T = _external(ch, t_B, s_AB)
    hbar = scipy.linalg.expm(-T) @ ctx.hmat @ scipy.linalg.expm(T)
    idx = ctx.space.a_sector()
    prov = {"method": "composite-ses", "species": "A"}
    return _a_operator(ctx, hbar[np.ix_(idx, idx)], False, prov)


def prefactor_drop_error(ch: CompositeHamiltonian, t_B: ClusterOperator, s_AB: Mapping) -> float:
    """Max change of the A-sector matrix when the left ``e^{-(T_B+S_AB)}`` is dropped."""
    ctx, T = _external(ch, t_B, s_AB)
    right = ctx.hmat @ scipy.linalg.expm(T)
    full = scipy.linalg.expm(-T) @ right
    idx = ctx.space.a_sector()
    return float(np.abs(full[np.ix_(idx, idx)] - right[np.ix_(idx, idx)]).max())


def composite_fock_normal(ctx: CompositeContext) -> np.ndarray:
    fA, fB, _ = composite_fock(ctx.ch)
    sA, sB = ctx.space.space_A, ctx.space.space_B
    FA = build_matrix(BareHamiltonian(ctx.ch.h_A.basis, 0.0, fA, np.zeros((len(fA),) * 4)), sA).matrix
    FB = build_matrix(BareHamiltonian(ctx.ch.h_B.basis, 0.0, fB, np.zeros((len(fB),) * 4)), sB).matrix
    F = np.kron(FA, np.eye(len(sB))) + np.kron(np.eye(len(sA)), FB)
    ref = ctx.space.reference_index
    return F - F[ref, ref] * np.eye(len(F))


def composite_sigma(ch, t_B: ClusterOperator, s_AB: Mapping) -> tuple[CompositeContext, np.ndarray]:
    """``sigma_B + rho_AB = (T_B + S_AB) - (T_B + S_AB)^+`` on the composite space."""
    ctx, T = _external(ch, t_B, s_AB)
    return ctx, T - T.T


def transformed_composite(ch, t_B: ClusterOperator, s_AB: Mapping, mode: str = "exact") -> np.ndarray:
    ctx, S = composite_sigma(ch, t_B, s_AB)
    H = ctx.hmat
    if mode == "exact":
        U = scipy.linalg.expm(S)
        return U.T @ H @ U
    c1 = H @ S - S @ H
    FN = composite_fock_normal(ctx)
    if mode == "c1":
        f2 = FN @ S - S @ FN
        return H + c1 + 0.5 * (f2 @ S - S @ f2)
    if mode == "c2":
        f2 = FN @ S - S @ FN
        f3 = f2 @ S - S @ f2
        return H + c1 + 0.5 * (c1 @ S - S @ c1) + (f3 @ S - S @ f3) / 6.0
    raise ValueError(f"unknown mode {mode!r}")


def ducc_downfold_B(ch: CompositeHamiltonian, t_B: ClusterOperator, s_AB: Mapping,
                    mode: str = "exact") -> EffectiveHamiltonian:
    """Hermitian A-species operator from the anti-Hermitian B and joint generators."""
    ctx = CompositeContext(ch)
    full = transformed_composite(ch, t_B, s_AB, mode)
    idx = ctx.space.a_sector()
    block = symmetrize_checked(full[np.ix_(idx, idx)], f"composite-ducc-{mode}")
    prov = {"method": f"composite-ducc-{mode}", "species": "A"}
    return _a_operator(ctx, block, True, prov)
