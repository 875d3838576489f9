"""Non-Hermitian downfolding over sub-system embedding sub-algebras (SES).

For an active space (R, S) the cluster operator splits into internal
amplitudes (all indices active) and external ones.  The external part is
folded into ``e^{-T_ext} H e^{T_ext}``, which is then projected onto the
complete active space; one of its eigenvalues reproduces the CC energy
whenever the active space is an SES of the CC truncation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ccsolver import ClusterOperator, context
from .fockspace import (ActiveSpace, DenseOperator, DeterminantSpace, DimensionCapError,
                        MAX_DIMENSION, TensorForm, cluster_matrix, eig_nonhermitian,
                        enumerate_space, exp_nilpotent_apply, similarity_transform)
from .integrals import (BareHamiltonian, FCIDUMPBoundsError, FCIDUMPError, SpinOrbitalBasis, _fmt,
                        read_fcidump_records)

log = logging.getLogger(__name__)


class NotSESError(ValueError):
    pass


@dataclass
class EffectiveHamiltonian:
    active: Optional[ActiveSpace]
    cas_space: DeterminantSpace
    matrix: DenseOperator
    hermitian: bool
    provenance: dict = field(default_factory=dict)
    tensor_form: Optional[TensorForm] = None

    def __post_init__(self):
        if self.hermitian and self.matrix.asymmetry() > 1e-10:
            raise ValueError("hermitian effective Hamiltonian is not symmetric")

    @property
    def dimension(self) -> int:
        return len(self.cas_space)


@dataclass(frozen=True)
class SESCheck:
    is_ses: bool
    max_cas_rank: int
    cc_rank: int
    explanation: str

    def __bool__(self):
        return self.is_ses


def is_ses(active: ActiveSpace, basis: SpinOrbitalBasis, cc_rank: int) -> SESCheck:
    """Whether every CAS determinant is reachable by excitations of rank <= cc_rank."""
    active.validate(basis)
    n_occ = len(active.occupied_spinorbs)
    n_virt = len(active.virtual_spinorbs)
    limit = min(n_occ, n_virt)
    ok = limit <= cc_rank
    why = (f"CAS reaches excitation rank {limit} (min of {n_occ} active occupied, "
           f"{n_virt} active virtual spin orbitals); CC rank bound is {cc_rank}")
    return SESCheck(ok, limit, cc_rank, why)


def partition(t: ClusterOperator, active: ActiveSpace) -> tuple[ClusterOperator, ClusterOperator]:
    t_int = t.restrict(active.is_internal)
    t_ext = t.restrict(lambda s: not active.is_internal(s))
    return t_int, t_ext


def build_heff_ses(h: BareHamiltonian, t_ext: ClusterOperator, active: ActiveSpace,
                   max_dimension: int = MAX_DIMENSION) -> EffectiveHamiltonian:
    """``(P + Q_int) e^{-T_ext} H e^{T_ext} (P + Q_int)`` on the CAS."""
    bad = [s for s in t_ext if active.is_internal(s)]
    if bad:
        raise ValueError(f"t_ext carries all-active amplitudes, e.g. {bad[0]}")
    ctx = context(h)
    if len(ctx.space) > max_dimension:
        raise DimensionCapError(f"full space of {len(ctx.space)} exceeds cap; use a smaller system")
    cas = enumerate_space(h.basis, active=active)
    T = DenseOperator(ctx.space, ctx.cache.matrix(t_ext))
    hbar = similarity_transform(ctx.hop, T, "exact")
    heff = hbar.project(cas)
    prov = {"method": "ses", "t_ext": t_ext.digest(), "active": [list(active.occupied),
                                                                  list(active.virtual)]}
    return EffectiveHamiltonian(active, cas, DenseOperator(cas, heff.matrix, prov), False, prov)


def trivial_heff(h: BareHamiltonian, t: ClusterOperator) -> float:
    """``<Phi| e^{-T} H e^{T} |Phi>``: the downfolded operator for the trivial sub-algebra."""
    ctx = context(h)
    T = DenseOperator(ctx.space, ctx.cache.matrix(t))
    hbar = similarity_transform(ctx.hop, T, "exact")
    ref = ctx.space.reference_index
    return float(hbar.matrix[ref, ref])


@dataclass
class SESResult:
    energy: float
    vector: np.ndarray
    heff: EffectiveHamiltonian
    cosine: float
    guaranteed: bool


def ses_energy(h: BareHamiltonian, t: ClusterOperator, active: ActiveSpace,
               force: bool = False) -> SESResult:
    """Eigenvalue of the SES effective Hamiltonian with maximal reference overlap.

    ``cosine`` compares the eigenvector with ``e^{T_int}|Phi>`` inside the
    CAS; it approaches 1 when ``t`` solves the CC equations.
    """
    check = is_ses(active, h.basis, t.rank)
    if not check and not force:
        raise NotSESError(check.explanation)
    if not check:
        log.warning("not an SES (%s); equivalence with the CC energy is void", check.explanation)
    t_int, t_ext = partition(t, active)
    heff = build_heff_ses(h, t_ext, active)
    energy, vec = eig_nonhermitian(heff.matrix)
    cas = heff.cas_space
    Tint = cluster_matrix(t_int, cas).matrix
    ansatz = exp_nilpotent_apply(Tint, cas.unit())
    cosine = float(abs(ansatz @ vec) / np.linalg.norm(ansatz) / np.linalg.norm(vec))
    heff.provenance["guarantee"] = bool(check)
    return SESResult(energy, vec, heff, cosine, bool(check))



# ---------------------------------------------------------------------------
# extended FCIDUMP export of tensor forms
# ---------------------------------------------------------------------------

def emit_effective_fcidump(form: TensorForm, occupied: Sequence[int], hermitian: bool,
                           tol: float = 1e-14) -> str:
    """Extended FCIDUMP text for a spin-orbital tensor form.

    Indices are 1-based positions in ``ORBITALS`` (spin orbitals, ascending,
    so the ``NELEC`` reference-occupied ones come first).  Coefficients are
    vacuum ordered: ``i j 0 0`` multiplies ``a+_i a_j`` and ``i j k l`` holds
    ``<ik||jl>`` in chemist order.  Every nonzero element is listed, so
    non-Hermitian operators survive the round trip.
    """
    occ = [p for p in form.orbitals if p in set(occupied)]
    if list(form.orbitals[:len(occ)]) != occ:
        raise ValueError("occupied orbitals must precede virtual ones")
    h = form.vacuum_one_body(occ)
    e0 = form.vacuum_scalar(occ)
    W = form.two_body
    out = [f" &FCI NORB={len(form.orbitals)},NELEC={len(occ)},MS2=0,",
           "  SPINORB=1,",
           f"  HERMITIAN={int(bool(hermitian))},",
           f"  RESIDUAL={form.residual_norm:.6e},",
           "  ORBITALS=" + ",".join(str(p) for p in form.orbitals) + ",",
           " &END"]
    if W.size:
        for i, k, j, l in zip(*np.nonzero(np.abs(W) > tol)):
            out.append(f"{_fmt(W[i, k, j, l])} {i + 1:4d} {j + 1:4d} {k + 1:4d} {l + 1:4d}")
    for i, j in zip(*np.nonzero(np.abs(h) > tol)):
        out.append(f"{_fmt(h[i, j])} {i + 1:4d} {j + 1:4d}    0    0")
    out.append(f"{_fmt(e0)}    0    0    0    0")
    return "\n".join(out) + "\n"


def parse_effective_fcidump(text: str) -> tuple[TensorForm, dict]:
    """Inverse of :func:`emit_effective_fcidump`; returns the normal-ordered form and header."""
    header, records = read_fcidump_records(text)
    if header.get("SPINORB") != 1:
        raise FCIDUMPError("line 1: not a spin-orbital (SPINORB=1) effective Hamiltonian")
    orbitals = header["ORBITALS"]
    orbitals = tuple([orbitals] if isinstance(orbitals, int) else orbitals)
    n, n_elec = header["NORB"], header["NELEC"]
    if len(orbitals) != n:
        raise FCIDUMPError(f"line 1: ORBITALS lists {len(orbitals)} entries, NORB={n}")
    h = np.zeros((n, n))
    W = np.zeros((n,) * 4)
    e0 = 0.0
    for line, value, i, j, k, l in records:
        if not all(0 <= x <= n for x in (i, j, k, l)):
            raise FCIDUMPBoundsError(f"line {line}: index outside [0, {n}]")
        if i and j and k and l:
            W[i - 1, k - 1, j - 1, l - 1] = value
        elif i and j:
            h[i - 1, j - 1] = value
        else:
            e0 = value
    occ = range(n_elec)
    f = h + sum(W[:, k, :, k] for k in occ) if n_elec else h
    scalar = e0 + sum(h[k, k] for k in occ) + 0.5 * sum(W[k, l, k, l] for k in occ for l in occ)
    form = TensorForm(float(scalar), f, W, float(header.get("RESIDUAL", 0.0)), orbitals)
    return form, header
