"""Hermitian downfolding with the double unitary CC ansatz.

The external generator is ``sigma = T_ext - T_ext^+`` built from CC
amplitudes.  Two finite commutator expansions of ``e^{-sigma} H e^{sigma}``
are provided (C1 and C2); the Fock-operator terms keep them consistent
through the perturbative order of the truncation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ccsolver import ClusterOperator, context
from .fockspace import (ActiveSpace, DenseOperator, build_matrix, cluster_matrix, enumerate_space,
                        nested_commutator, one_body_hamiltonian, similarity_transform)
from .integrals import BareHamiltonian, FockOperator
from .ses import EffectiveHamiltonian

log = logging.getLogger(__name__)

SYMMETRY_ASSERT = 1e-10
SYMMETRY_ERROR = 1e-8


class HermiticityError(RuntimeError):
    pass


@dataclass
class AntiHermitianGenerator:
    source: ClusterOperator

    def realize(self, space) -> DenseOperator:
        T = cluster_matrix(self.source, space).matrix
        return DenseOperator(space, T - T.T, {"operator": "sigma"})


def build_sigma_ext(t_ext: ClusterOperator) -> AntiHermitianGenerator:
    return AntiHermitianGenerator(t_ext)


def fock_normal_matrix(h: BareHamiltonian, f: FockOperator, space) -> np.ndarray:
    """Normal-ordered Fock operator ``F - <Phi|F|Phi>`` on ``space``."""
    F = build_matrix(one_body_hamiltonian(f.f, h.basis), space).matrix
    e0 = sum(f.f[i, i] for i in h.basis.occupied)
    return F - e0 * np.eye(len(space))


def ducc_terms(h: BareHamiltonian, f: FockOperator, sigma: AntiHermitianGenerator,
               scheme: str) -> list[np.ndarray]:
    """Individual terms of the C1 or C2 expansion on the full space, in order."""
    ctx = context(h)
    H = ctx.hop.matrix
    S = sigma.realize(ctx.space).matrix
    FN = fock_normal_matrix(h, f, ctx.space)
    if scheme == "c1":
        return [H, nested_commutator(H, S, 1), 0.5 * nested_commutator(FN, S, 2)]
    if scheme == "c2":
        return [H, nested_commutator(H, S, 1), 0.5 * nested_commutator(H, S, 2),
                nested_commutator(FN, S, 3) / 6.0]
    raise ValueError(f"unknown commutator scheme {scheme!r}")


def symmetrize_checked(M: np.ndarray, label: str) -> np.ndarray:
    asym = float(np.abs(M - M.T).max(initial=0.0))
    if asym > SYMMETRY_ERROR:
        raise HermiticityError(f"{label}: asymmetry {asym:.2e} before symmetrization")
    if asym > SYMMETRY_ASSERT:
        log.warning("%s: asymmetry %.2e exceeds %.0e", label, asym, SYMMETRY_ASSERT)
    return 0.5 * (M + M.T)


def _downfold(h, f, sigma, active, scheme) -> EffectiveHamiltonian:
    ctx = context(h)
    total = np.zeros_like(ctx.hop.matrix)
    for term in ducc_terms(h, f, sigma, scheme):
        total = total + term
    cas = enumerate_space(h.basis, active=active)
    idx = cas.positions_in(ctx.space)
    block = total[np.ix_(idx, idx)]
    asym = float(np.abs(block - block.T).max(initial=0.0))
    block = symmetrize_checked(block, f"ducc-{scheme}")
    prov = {"method": f"ducc-{scheme}", "sigma_source": sigma.source.digest(),
            "asymmetry": asym, "active": [list(active.occupied), list(active.virtual)]}
    return EffectiveHamiltonian(active, cas, DenseOperator(cas, block, prov), True, prov)


def ducc_c1(h: BareHamiltonian, f: FockOperator, sigma: AntiHermitianGenerator,
            active: ActiveSpace) -> EffectiveHamiltonian:
    """``H + [H, s] + 1/2 [[F_N, s], s]`` projected onto the CAS."""
    return _downfold(h, f, sigma, active, "c1")


def ducc_c2(h: BareHamiltonian, f: FockOperator, sigma: AntiHermitianGenerator,
            active: ActiveSpace) -> EffectiveHamiltonian:
    """``H + [H, s] + 1/2 [[H, s], s] + 1/6 [[[F_N, s], s], s]`` projected onto the CAS."""
    return _downfold(h, f, sigma, active, "c2")


def ducc_exact(h: BareHamiltonian, sigma: AntiHermitianGenerator,
               active: ActiveSpace | None = None) -> EffectiveHamiltonian:
    """Untruncated ``e^{-s} H e^{s}``, projected onto ``active`` (full space if None)."""
    ctx = context(h)
    S = sigma.realize(ctx.space)
    hbar = similarity_transform(ctx.hop, S, "exact")
    space = ctx.space if active is None else enumerate_space(h.basis, active=active)
    block = symmetrize_checked(hbar.project(space).matrix, "ducc-exact")
    prov = {"method": "ducc-exact", "sigma_source": sigma.source.digest()}
    return EffectiveHamiltonian(active, space, DenseOperator(space, block, prov), True, prov)


def bare_cas(h: BareHamiltonian, active: ActiveSpace) -> EffectiveHamiltonian:
    ctx = context(h)
    cas = enumerate_space(h.basis, active=active)
    prov = {"method": "bare"}
    return EffectiveHamiltonian(active, cas, DenseOperator(cas, ctx.hop.project(cas).matrix, prov),
                                True, prov)


def ducc_energy(heff: EffectiveHamiltonian) -> tuple[float, np.ndarray]:
    if not heff.hermitian:
        raise ValueError("ducc_energy needs a Hermitian effective Hamiltonian")
    w, v = np.linalg.eigh(heff.matrix.matrix)
    vec = v[:, 0]
    k = int(np.argmax(np.abs(vec)))
    return float(w[0]), (-vec if vec[k] < 0 else vec)
