"""Masked coupled-cluster amplitude equations solved in the dense engine.

Residuals ``<Phi| E_mu^+ e^{-T} H e^{T} |Phi>`` are evaluated exactly by
applying the exponentials to vectors in a determinant space, so any subset
of excitations (full CCSD, active-space internal sets, unions of those,
composite-system excitations) is handled by the same code.
"""
from __future__ import annotations

import hashlib
import itertools
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .fockspace import (DeterminantSpace, ExcitationCache, Signature,
                        build_matrix, enumerate_space, excitation_cache,
                        exp_nilpotent_apply)
from .integrals import BareHamiltonian, SpinOrbitalBasis, build_fock

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 200
DIIS_SPACE = 8
DENOMINATOR_FLOOR = 1e-10


class DenominatorError(ZeroDivisionError):
    pass


def _spin_sum(orbs: Iterable[int]) -> int:
    return sum(p % 2 for p in orbs)


def valid_signature(sig: Signature, basis: SpinOrbitalBasis) -> bool:
    occ, virt = sig
    return (len(occ) == len(virt) > 0
            and list(occ) == sorted(set(occ)) and list(virt) == sorted(set(virt))
            and all(i in basis.occupied for i in occ)
            and all(a in basis.virtual for a in virt)
            and _spin_sum(occ) == _spin_sum(virt))


class ClusterOperator(Mapping):
    """Rank-bounded map from excitation signatures to amplitudes."""

    def __init__(self, basis: SpinOrbitalBasis, amplitudes: Mapping[Signature, float] | None = None,
                 rank: int = 2):
        self.basis = basis
        self.rank = rank
        self._amps: dict[Signature, float] = {}
        for sig, t in (amplitudes or {}).items():
            sig = (tuple(sig[0]), tuple(sig[1]))
            if not valid_signature(sig, basis):
                raise ValueError(f"invalid excitation signature {sig}")
            if len(sig[0]) > rank:
                raise ValueError(f"signature {sig} exceeds rank bound {rank}")
            self._amps[sig] = float(t)

    def __getitem__(self, sig):
        return self._amps[sig]

    def __iter__(self) -> Iterator[Signature]:
        return iter(sorted(self._amps))

    def __len__(self):
        return len(self._amps)

    def __repr__(self):
        return f"ClusterOperator(rank={self.rank}, n={len(self)})"

    def restrict(self, keep: Callable[[Signature], bool]) -> "ClusterOperator":
        return ClusterOperator(self.basis, {s: t for s, t in self._amps.items() if keep(s)}, self.rank)

    def max_rank(self) -> int:
        return max((len(s[0]) for s in self._amps), default=0)

    def digest(self) -> str:
        h = hashlib.sha256()
        for sig in self:
            h.update(repr((sig, round(self._amps[sig], 14))).encode())
        return h.hexdigest()[:16]

    def __add__(self, other: "ClusterOperator") -> "ClusterOperator":
        merged = dict(self._amps)
        for s, t in other.items():
            merged[s] = merged.get(s, 0.0) + t
        return ClusterOperator(self.basis, merged, max(self.rank, other.rank))


def excitation_signatures(basis: SpinOrbitalBasis, max_rank: int = 2,
                          orbitals: Iterable[int] | None = None) -> list[Signature]:
    """All S_z-conserving signatures up to ``max_rank`` (optionally over a subset)."""
    allowed = set(range(basis.n_spinorb) if orbitals is None else orbitals)
    occ = [i for i in basis.occupied if i in allowed]
    virt = [a for a in basis.virtual if a in allowed]
    out = []
    for k in range(1, max_rank + 1):
        for o in itertools.combinations(occ, k):
            for v in itertools.combinations(virt, k):
                if _spin_sum(o) == _spin_sum(v):
                    out.append((o, v))
    return out


@dataclass(frozen=True)
class AmplitudeMask:
    signatures: frozenset

    @classmethod
    def of(cls, sigs: Iterable[Signature], basis: SpinOrbitalBasis | None = None) -> "AmplitudeMask":
        sigs = frozenset((tuple(o), tuple(v)) for o, v in sigs)
        if not sigs:
            raise ValueError("amplitude mask is empty")
        if basis is not None:
            bad = [s for s in sigs if not valid_signature(s, basis)]
            if bad:
                raise ValueError(f"invalid signatures in mask: {sorted(bad)[:3]}")
        return cls(sigs)

    @classmethod
    def ccsd(cls, basis: SpinOrbitalBasis) -> "AmplitudeMask":
        return cls.of(excitation_signatures(basis, 2))

    @classmethod
    def rank(cls, basis: SpinOrbitalBasis, max_rank: int) -> "AmplitudeMask":
        return cls.of(excitation_signatures(basis, max_rank))

    def __iter__(self):
        return iter(sorted(self.signatures))

    def __len__(self):
        return len(self.signatures)

    def __or__(self, other: "AmplitudeMask") -> "AmplitudeMask":
        return AmplitudeMask(self.signatures | other.signatures)

    @property
    def max_rank(self) -> int:
        return max(len(s[0]) for s in self.signatures)


@dataclass(frozen=True)
class CCResult:
    t: ClusterOperator
    energy: float
    correlation_energy: float
    residual_norm: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


class DIIS:
    def __init__(self, size: int = DIIS_SPACE):
        self.size = size
        self.vecs: list[np.ndarray] = []
        self.errs: list[np.ndarray] = []

    def update(self, vec: np.ndarray, err: np.ndarray) -> np.ndarray:
        self.vecs.append(vec.copy())
        self.errs.append(err.copy())
        if len(self.vecs) > self.size:
            self.vecs.pop(0)
            self.errs.pop(0)
        n = len(self.vecs)
        if n < 2:
            return vec
        B = -np.ones((n + 1, n + 1))
        B[n, n] = 0.0
        E = np.array(self.errs)
        B[:n, :n] = E @ E.T
        rhs = np.zeros(n + 1)
        rhs[n] = -1.0
        scale = np.abs(B[:n, :n]).max()
        if scale > 0:
            B[:n, :n] /= scale
        c = np.linalg.lstsq(B, rhs, rcond=None)[0][:n]
        return c @ np.array(self.vecs)


class MaskedEquations:
    """Amplitude equations for a list of excitation operators on one space.

    ``generators[mu]`` is the sparse ``(rows, cols, signs)`` matrix of
    ``E_mu``; ``targets[mu] = (index, sign)`` locates ``E_mu|Phi>``.
    """

    def __init__(self, hmat: np.ndarray, ref_index: int, generators: Sequence[tuple],
                 denominators: np.ndarray, labels: Sequence | None = None):
        self.h = hmat
        self.ref = ref_index
        self.generators = list(generators)
        self.denominators = np.asarray(denominators, dtype=float)
        self.labels = list(labels) if labels is not None else list(range(len(generators)))
        self.targets = []
        for rows, cols, signs in self.generators:
            hit = np.flatnonzero(cols == ref_index)
            if len(hit) != 1:
                raise ValueError("excitation operator does not act on the reference")
            self.targets.append((int(rows[hit[0]]), float(signs[hit[0]])))
        self._tidx = np.array([t[0] for t in self.targets], dtype=int)
        self._tsgn = np.array([t[1] for t in self.targets])

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    def t_matrix(self, t: np.ndarray) -> np.ndarray:
        M = np.zeros_like(self.h)
        for (rows, cols, signs), amp in zip(self.generators, t):
            if amp:
                M[rows, cols] += amp * signs
        return M

    def transformed_reference(self, t: np.ndarray) -> np.ndarray:
        """``e^{-T} H e^{T} |Phi>`` as a vector."""
        T = self.t_matrix(t)
        phi = np.zeros(self.dim)
        phi[self.ref] = 1.0
        psi = exp_nilpotent_apply(T, phi)
        return exp_nilpotent_apply(-T, self.h @ psi)

    def residual(self, t: np.ndarray) -> tuple[np.ndarray, float]:
        z = self.transformed_reference(t)
        return self._tsgn * z[self._tidx], float(z[self.ref])

    def initial_guess(self) -> np.ndarray:
        zero = np.zeros(len(self.generators))
        r, _ = self.residual(zero)
        return r / self.denominators

    def solve(self, t0: np.ndarray | None = None, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER, diis: bool = True, damping: float = 1.0):
        t = self.initial_guess() if t0 is None else np.array(t0, dtype=float)
        acc = DIIS() if diis else None
        history = []
        r, e = self.residual(t)
        rnorm = float(np.abs(r).max(initial=0.0))
        it = 0
        while rnorm > tol and it < max_iter:
            it += 1
            t_new = t + damping * r / self.denominators
            if acc is not None:
                t_new = acc.update(t_new, t_new - t)
            t = t_new
            r, e = self.residual(t)
            rnorm = float(np.abs(r).max(initial=0.0))
            history.append((e, rnorm))
            log.debug("iter %3d  E = %.12f  |R| = %.3e", it, e, rnorm)
            if not np.isfinite(rnorm):
                break
        return t, e, rnorm, it, rnorm <= tol, history

    def solve_newton(self, t0: np.ndarray | None = None, tol: float = DEFAULT_TOL,
                     max_iter: int = 50, step: float = 1e-6):
        """Newton iterations with a central-difference Jacobian."""
        t = self.initial_guess() if t0 is None else np.array(t0, dtype=float)
        r, e = self.residual(t)
        rnorm = float(np.abs(r).max(initial=0.0))
        it = 0
        while rnorm > tol and it < max_iter:
            it += 1
            J = np.empty((len(t), len(t)))
            for k in range(len(t)):
                dt = np.zeros_like(t)
                dt[k] = step
                J[:, k] = (self.residual(t + dt)[0] - self.residual(t - dt)[0]) / (2 * step)
            t = t - np.linalg.solve(J, r)
            r, e = self.residual(t)
            rnorm = float(np.abs(r).max(initial=0.0))
        return t, e, rnorm, it, rnorm <= tol, []


def fock_denominator(sig: Signature, eps: np.ndarray) -> float:
    occ, virt = sig
    return float(sum(eps[i] for i in occ) - sum(eps[a] for a in virt))


def _check_denominators(sigs, denoms):
    for sig, d in zip(sigs, denoms):
        if abs(d) < DENOMINATOR_FLOOR:
            raise DenominatorError(
                f"near-zero denominator {d:.3e} for occupied {sig[0]} -> virtual {sig[1]}")


class CCContext:
    """Hamiltonian matrix and excitation cache for one molecular problem."""

    def __init__(self, h: BareHamiltonian, space: DeterminantSpace | None = None):
        self.h = h
        self.space = enumerate_space(h.basis) if space is None else space
        self.hop = build_matrix(h, self.space)
        self.fock = build_fock(h)
        self.cache: ExcitationCache = excitation_cache(self.space)

    def equations(self, sigs: Sequence[Signature]) -> MaskedEquations:
        eps = self.fock.orbital_energies
        denoms = np.array([fock_denominator(s, eps) for s in sigs])
        _check_denominators(sigs, denoms)
        gens = [self.cache.get(s) for s in sigs]
        return MaskedEquations(self.hop.matrix, self.space.reference_index, gens, denoms, sigs)


_CONTEXTS: dict = {}


def context(h: BareHamiltonian) -> CCContext:
    ctx = _CONTEXTS.get(id(h))
    if ctx is None or ctx.h is not h:
        if len(_CONTEXTS) > 16:
            _CONTEXTS.clear()
        ctx = _CONTEXTS[id(h)] = CCContext(h)
    return ctx


def solve_cc(h: BareHamiltonian, mask: AmplitudeMask, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, diis: bool = True,
             t0: ClusterOperator | None = None) -> CCResult:
    """Solve ``<D_mu| e^{-T} H e^{T} |Phi> = 0`` for every ``mu`` in ``mask``."""
    if not len(mask):
        raise ValueError("amplitude mask is empty")
    ctx = context(h)
    sigs = list(mask)
    eqs = ctx.equations(sigs)
    start = None if t0 is None else np.array([t0.get(s, 0.0) for s in sigs])
    t, e, rnorm, it, ok, hist = eqs.solve(start, tol=tol, max_iter=max_iter, diis=diis)
    if not ok:
        log.warning("CC did not converge in %d iterations (|R| = %.3e)", it, rnorm)
    amps = ClusterOperator(h.basis, dict(zip(sigs, t)), rank=max(mask.max_rank, 1))
    return CCResult(amps, e, e - ctx.fock.reference_energy, rnorm, it, ok, hist)


def cc_energy(h: BareHamiltonian, t: ClusterOperator) -> float:
    """``<Phi| e^{-T} H e^{T} |Phi>``."""
    ctx = context(h)
    T = ctx.cache.matrix(t)
    phi = ctx.space.unit()
    z = exp_nilpotent_apply(-T, ctx.hop.matrix @ exp_nilpotent_apply(T, phi))
    return float(z[ctx.space.reference_index])


def energy_dependent_energy(h: BareHamiltonian, t: ClusterOperator) -> float:
    """``<Phi| H e^{T} |Phi>`` (projection of the energy-dependent form)."""
    ctx = context(h)
    T = ctx.cache.matrix(t)
    psi = exp_nilpotent_apply(T, ctx.space.unit())
    return float((ctx.hop.matrix @ psi)[ctx.space.reference_index])


def residual_vector(h: BareHamiltonian, t: ClusterOperator, mask: AmplitudeMask) -> dict:
    """``{mu: <D_mu| e^{-T} H e^{T} |Phi>}`` for every ``mu`` in ``mask``."""
    ctx = context(h)
    T = ctx.cache.matrix(t)
    z = exp_nilpotent_apply(-T, ctx.hop.matrix @ exp_nilpotent_apply(T, ctx.space.unit()))
    out = {}
    for sig in mask:
        rows, cols, signs = ctx.cache.get(sig)
        k = np.flatnonzero(cols == ctx.space.reference_index)[0]
        out[sig] = float(signs[k] * z[rows[k]])
    return out


# ---------------------------------------------------------------------------
# amplitude dump
# ---------------------------------------------------------------------------

def dump_amplitudes(t: ClusterOperator) -> str:
    lines = []
    for occ, virt in t:
        idx = " ".join(str(i) for i in (*occ, *virt))
        lines.append(f"{len(occ)}  {idx}  {t[(occ, virt)]:.15e}")
    return "\n".join(lines) + "\n"


def parse_amplitudes(text: str, basis: SpinOrbitalBasis, rank: int | None = None) -> ClusterOperator:
    amps = {}
    for n, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        k = int(parts[0])
        if len(parts) != 2 * k + 2:
            raise ValueError(f"line {n}: expected {2 * k + 2} fields")
        occ = tuple(int(x) for x in parts[1:k + 1])
        virt = tuple(int(x) for x in parts[k + 1:2 * k + 1])
        amps[(occ, virt)] = float(parts[-1])
    if rank is None:
        rank = max((len(s[0]) for s in amps), default=1)
    return ClusterOperator(basis, amps, rank)


def save_amplitudes(t: ClusterOperator, path: str | Path) -> None:
    Path(path).write_text(dump_amplitudes(t))


def load_amplitudes(path: str | Path, basis: SpinOrbitalBasis) -> ClusterOperator:
    return parse_amplitudes(Path(path).read_text(), basis)
