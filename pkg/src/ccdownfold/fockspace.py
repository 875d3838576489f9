"""Exact determinant-space engine.

Determinants are integer bitmasks over spin orbitals (bit ``p`` set when
spin orbital ``p`` is occupied).  Operator strings act right to left and a
creation or annihilation on orbital ``p`` picks up the sign
``(-1)**(number of occupied orbitals below p)``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .integrals import BareHamiltonian, SpinOrbitalBasis, build_fock

MAX_DIMENSION = 20_000

Signature = tuple[tuple[int, ...], tuple[int, ...]]


class SpaceError(ValueError):
    pass


class DimensionCapError(SpaceError):
    pass


class LeavesSpaceError(SpaceError):
    """An operator string mapped a determinant outside the space."""


class EigenSelectionError(RuntimeError):
    def __init__(self, message, spectrum):
        super().__init__(message)
        self.spectrum = spectrum


# ---------------------------------------------------------------------------
# bit-string primitives
# ---------------------------------------------------------------------------

def popcount(x: int) -> int:
    return x.bit_count()


def occupied_list(det: int) -> list[int]:
    out, p = [], 0
    while det:
        if det & 1:
            out.append(p)
        det >>= 1
        p += 1
    return out


def annihilate(det: int, p: int):
    """Return ``(sign, det')`` for ``a_p |det>`` or ``None`` if it vanishes."""
    bit = 1 << p
    if not det & bit:
        return None
    sign = -1 if popcount(det & (bit - 1)) % 2 else 1
    return sign, det ^ bit


def create(det: int, p: int):
    bit = 1 << p
    if det & bit:
        return None
    sign = -1 if popcount(det & (bit - 1)) % 2 else 1
    return sign, det | bit


def apply_string(det: int, ops: Sequence[tuple[int, bool]]):
    """Apply an operator string to ``det``.

    ``ops`` is written left to right as in the operator product, each entry
    ``(p, dagger)``; the rightmost acts first.  Returns ``(sign, det')`` or
    ``None``.
    """
    sign = 1
    for p, dagger in reversed(ops):
        res = create(det, p) if dagger else annihilate(det, p)
        if res is None:
            return None
        s, det = res
        sign *= s
    return sign, det


def excitation_string(sig: Signature) -> list[tuple[int, bool]]:
    """Operator string a+_{a1}..a+_{ak} a_{ik}..a_{i1} for ``sig = (occ, virt)``."""
    occ, virt = sig
    return [(a, True) for a in virt] + [(i, False) for i in reversed(occ)]


def excitation_rank(det: int, reference: int) -> int:
    return popcount(reference & ~det)


# ---------------------------------------------------------------------------
# active spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActiveSpace:
    """Active occupied (R) and active virtual (S) spatial orbitals."""

    occupied: tuple[int, ...]
    virtual: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "occupied", tuple(sorted(set(self.occupied))))
        object.__setattr__(self, "virtual", tuple(sorted(set(self.virtual))))
        if not self.occupied or not self.virtual:
            raise ValueError("active space needs at least one occupied and one virtual orbital")

    def validate(self, basis: SpinOrbitalBasis) -> None:
        if not set(self.occupied) <= set(basis.occupied_spatial):
            raise ValueError(f"active occupied {self.occupied} not within {basis.occupied_spatial}")
        if not set(self.virtual) <= set(basis.virtual_spatial):
            raise ValueError(f"active virtual {self.virtual} not within {basis.virtual_spatial}")

    @property
    def x_R(self) -> int:
        return len(self.occupied)

    @property
    def y_S(self) -> int:
        return len(self.virtual)

    @property
    def occupied_spinorbs(self) -> tuple[int, ...]:
        return tuple(2 * p + s for p in self.occupied for s in (0, 1))

    @property
    def virtual_spinorbs(self) -> tuple[int, ...]:
        return tuple(2 * p + s for p in self.virtual for s in (0, 1))

    @property
    def spinorbs(self) -> tuple[int, ...]:
        return tuple(sorted(self.occupied_spinorbs + self.virtual_spinorbs))

    @property
    def mask(self) -> int:
        return sum(1 << p for p in self.spinorbs)

    def is_internal(self, sig: Signature) -> bool:
        act = set(self.spinorbs)
        return all(p in act for p in sig[0]) and all(p in act for p in sig[1])

    @classmethod
    def full(cls, basis: SpinOrbitalBasis) -> "ActiveSpace":
        return cls(basis.occupied_spatial, basis.virtual_spatial)

    @classmethod
    def lowest(cls, basis: SpinOrbitalBasis, n_occ: int | None = None,
               n_virt: int | None = None) -> "ActiveSpace":
        """Highest ``n_occ`` occupied and lowest ``n_virt`` virtual orbitals (None = all)."""
        occ = basis.occupied_spatial
        virt = basis.virtual_spatial
        occ = occ if n_occ is None else occ[len(occ) - n_occ:]
        virt = virt if n_virt is None else virt[:n_virt]
        return cls(occ, virt)


# ---------------------------------------------------------------------------
# determinant spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DeterminantSpace:
    n_spinorb: int
    n_elec: int
    reference: int
    determinants: tuple[int, ...]
    label: str = "fci"

    def __post_init__(self):
        if not self.determinants:
            raise SpaceError("empty determinant space")

    def __len__(self) -> int:
        return len(self.determinants)

    def __eq__(self, other):
        return (isinstance(other, DeterminantSpace) and self.n_spinorb == other.n_spinorb
                and self.determinants == other.determinants)

    def __hash__(self):
        return hash((self.n_spinorb, self.determinants))

    @cached_property
    def index(self) -> dict[int, int]:
        return {d: i for i, d in enumerate(self.determinants)}

    @property
    def reference_index(self) -> int:
        return self.index[self.reference]

    def ranks(self) -> np.ndarray:
        return np.array([excitation_rank(d, self.reference) for d in self.determinants])

    def unit(self, det: int | None = None) -> np.ndarray:
        v = np.zeros(len(self))
        v[self.index[self.reference if det is None else det]] = 1.0
        return v

    def positions_in(self, other: "DeterminantSpace") -> np.ndarray:
        """Indices of this space's determinants inside ``other``."""
        try:
            return np.array([other.index[d] for d in self.determinants], dtype=int)
        except KeyError as exc:
            raise SpaceError(f"determinant {exc.args[0]:b} not in target space") from None

    def describe(self) -> dict:
        return {"n_spinorb": self.n_spinorb, "n_elec": self.n_elec,
                "reference": self.reference, "label": self.label,
                "determinants": list(self.determinants)}


def _spin_strings(orbitals: Sequence[int], n: int) -> list[int]:
    return [sum(1 << p for p in c) for c in itertools.combinations(orbitals, n)]


def enumerate_space(basis: SpinOrbitalBasis, n_elec: int | None = None,
                    active: ActiveSpace | None = None, max_rank: int | None = None,
                    max_dimension: int = MAX_DIMENSION) -> DeterminantSpace:
    """Fixed particle number, S_z = 0 determinant space.

    ``active`` restricts to determinants that differ from the reference only
    inside the active orbitals; ``max_rank`` bounds the excitation level.
    """
    n_elec = basis.n_elec if n_elec is None else n_elec
    if n_elec > basis.n_spinorb:
        raise SpaceError(f"{n_elec} electrons do not fit in {basis.n_spinorb} spin orbitals")
    if n_elec % 2:
        raise SpaceError("S_z = 0 spaces need an even electron count")
    ref = basis.reference_mask if n_elec == basis.n_elec else (1 << n_elec) - 1
    alpha = list(range(0, basis.n_spinorb, 2))
    beta = list(range(1, basis.n_spinorb, 2))
    frozen_occ = frozen_empty = 0
    if active is not None:
        active.validate(basis)
        frozen_occ = ref & ~active.mask
        frozen_empty = ~ref & ~active.mask & ((1 << basis.n_spinorb) - 1)
    half = n_elec // 2
    dets = []
    for a in _spin_strings(alpha, half):
        for b in _spin_strings(beta, half):
            d = a | b
            if (d & frozen_occ) != frozen_occ or d & frozen_empty:
                continue
            if max_rank is not None and excitation_rank(d, ref) > max_rank:
                continue
            dets.append(d)
    if not dets:
        raise SpaceError("constraints leave an empty determinant space")
    if len(dets) > max_dimension:
        raise DimensionCapError(
            f"space of {len(dets)} determinants exceeds the cap {max_dimension}; "
            "use a smaller test system")
    label = "fci" if active is None and max_rank is None else "cas"
    return DeterminantSpace(basis.n_spinorb, n_elec, ref, tuple(sorted(dets)), label)


# ---------------------------------------------------------------------------
# dense operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenseOperator:
    space: DeterminantSpace
    matrix: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.space)
        if self.matrix.shape != (n, n):
            raise SpaceError(f"matrix shape {self.matrix.shape} does not match space of size {n}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("operator has non-finite entries")

    def __add__(self, other):
        _check_same(self, other)
        return DenseOperator(self.space, self.matrix + other.matrix)

    def __sub__(self, other):
        _check_same(self, other)
        return DenseOperator(self.space, self.matrix - other.matrix)

    def __mul__(self, c: float):
        return DenseOperator(self.space, c * self.matrix)

    __rmul__ = __mul__

    def __matmul__(self, other):
        _check_same(self, other)
        return DenseOperator(self.space, self.matrix @ other.matrix)

    @property
    def T(self):
        return DenseOperator(self.space, self.matrix.T.copy())

    def asymmetry(self) -> float:
        return float(np.abs(self.matrix - self.matrix.T).max(initial=0.0))

    def project(self, sub: DeterminantSpace) -> "DenseOperator":
        idx = sub.positions_in(self.space)
        return DenseOperator(sub, self.matrix[np.ix_(idx, idx)].copy(), dict(self.provenance))


def _check_same(a: DenseOperator, b: DenseOperator) -> None:
    if a.space != b.space:
        raise SpaceError("operators act on different determinant spaces")


def identity(space: DeterminantSpace) -> DenseOperator:
    return DenseOperator(space, np.eye(len(space)))


def build_matrix(h: BareHamiltonian, space: DeterminantSpace) -> DenseOperator:
    """Hamiltonian matrix by the Slater-Condon rules."""
    if space.n_spinorb != h.basis.n_spinorb:
        raise SpaceError("space and Hamiltonian use different spin-orbital bases")
    hh, v = h.h, h.v
    n = space.n_spinorb
    index = space.index
    M = np.zeros((len(space), len(space)))
    for col, det in enumerate(space.determinants):
        occ = occupied_list(det)
        emp = [p for p in range(n) if not det >> p & 1]
        M[col, col] = (h.e_core + sum(hh[p, p] for p in occ)
                       + 0.5 * sum(v[p, q, p, q] for p in occ for q in occ))
        for i in occ:
            for a in emp:
                if (i - a) % 2:
                    continue
                target = det ^ (1 << i) ^ (1 << a)
                row = index.get(target)
                if row is None:
                    continue
                sign, _ = apply_string(det, [(a, True), (i, False)])
                M[row, col] = sign * (hh[a, i] + sum(v[a, k, i, k] for k in occ if k != i))
        for i, j in itertools.combinations(occ, 2):
            for a, b in itertools.combinations(emp, 2):
                if (i % 2 + j % 2) != (a % 2 + b % 2):
                    continue
                target = det ^ (1 << i) ^ (1 << j) ^ (1 << a) ^ (1 << b)
                row = index.get(target)
                if row is None:
                    continue
                sign, _ = apply_string(det, [(a, True), (b, True), (j, False), (i, False)])
                M[row, col] = sign * v[a, b, i, j]
    return DenseOperator(space, M, {"operator": "H"})


def one_body_hamiltonian(f: np.ndarray, basis: SpinOrbitalBasis, scalar: float = 0.0) -> BareHamiltonian:
    n = basis.n_spinorb
    return BareHamiltonian(basis, scalar, np.array(f, dtype=float), np.zeros((n, n, n, n)))


def string_matrix(ops: Sequence[tuple[int, bool]], space: DeterminantSpace,
                  target: DeterminantSpace | None = None, project: bool = False):
    """Sparse ``(rows, cols, signs)`` of an operator string between spaces.

    Images outside ``target`` raise :class:`LeavesSpaceError` unless
    ``project`` is set, in which case they are discarded.
    """
    target = space if target is None else target
    rows, cols, signs = [], [], []
    tindex = target.index
    for col, det in enumerate(space.determinants):
        res = apply_string(det, ops)
        if res is None:
            continue
        sign, new = res
        row = tindex.get(new)
        if row is None:
            if project:
                continue
            raise LeavesSpaceError(f"string {ops} maps {det:b} to {new:b} outside the space")
        rows.append(row)
        cols.append(col)
        signs.append(sign)
    return np.array(rows, dtype=int), np.array(cols, dtype=int), np.array(signs, dtype=float)


def brute_force_hamiltonian(h: BareHamiltonian, space: DeterminantSpace) -> np.ndarray:
    """Hamiltonian matrix by explicit operator-string application.

    Independent of :func:`build_matrix`; used as its oracle.
    """
    n = space.n_spinorb
    M = np.eye(len(space)) * h.e_core
    for p, q in itertools.product(range(n), repeat=2):
        if h.h[p, q] == 0.0:
            continue
        r, c, s = string_matrix([(p, True), (q, False)], space, project=True)
        np.add.at(M, (r, c), h.h[p, q] * s)
    for p, q, r_, s_ in itertools.product(range(n), repeat=4):
        val = h.v[p, q, r_, s_]
        if val == 0.0:
            continue
        r, c, s = string_matrix([(p, True), (q, True), (s_, False), (r_, False)], space, project=True)
        np.add.at(M, (r, c), 0.25 * val * s)
    return M


class ExcitationCache:
    """Per-space cache of excitation-operator matrices keyed by signature."""

    def __init__(self, space: DeterminantSpace, project: bool = False):
        self.space = space
        self.project = project
        self._cache: dict[Signature, tuple] = {}

    def get(self, sig: Signature):
        entry = self._cache.get(sig)
        if entry is None:
            entry = string_matrix(excitation_string(sig), self.space, project=self.project)
            self._cache[sig] = entry
        return entry

    def matrix(self, amplitudes: Mapping[Signature, float] | Iterable) -> np.ndarray:
        items = amplitudes.items() if hasattr(amplitudes, "items") else amplitudes
        M = np.zeros((len(self.space), len(self.space)))
        for sig, t in items:
            if t == 0.0:
                continue
            r, c, s = self.get(sig)
            M[r, c] += t * s
        return M

    def dense(self, sig: Signature) -> np.ndarray:
        r, c, s = self.get(sig)
        M = np.zeros((len(self.space), len(self.space)))
        M[r, c] = s
        return M


_CACHES: dict = {}


def excitation_cache(space: DeterminantSpace, project: bool = False) -> ExcitationCache:
    key = (space, project)
    cache = _CACHES.get(key)
    if cache is None:
        if len(_CACHES) > 64:
            _CACHES.clear()
        cache = _CACHES[key] = ExcitationCache(space, project)
    return cache


def cluster_matrix(t: Mapping[Signature, float], space: DeterminantSpace,
                   project: bool = False) -> DenseOperator:
    """Matrix of ``sum t * E`` on ``space``.

    Leaving the space is an error unless ``project`` is requested for a
    truncated space.
    """
    M = excitation_cache(space, project).matrix(t)
    return DenseOperator(space, M, {"operator": "T"})


# ---------------------------------------------------------------------------
# eigensolvers
# ---------------------------------------------------------------------------

def _fix_sign(vec: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(vec)))
    return -vec if vec[k] < 0 else vec


def fci_ground(op: DenseOperator, tol: float = 1e-10) -> tuple[float, np.ndarray]:
    if op.asymmetry() > tol:
        raise ValueError(f"fci_ground needs a symmetric matrix (asymmetry {op.asymmetry():.2e}); "
                         "use eig_nonhermitian")
    w, v = np.linalg.eigh(op.matrix)
    return float(w[0]), _fix_sign(v[:, 0])


def eig_nonhermitian(op: DenseOperator, reference: int | None = None,
                     imag_tol: float = 1e-8) -> tuple[float, np.ndarray]:
    """Real eigenvalue whose right eigenvector overlaps most with the reference.

    ``reference`` is a row index (default: the space's reference determinant).
    """
    ref = op.space.reference_index if reference is None else reference
    w, v = scipy.linalg.eig(op.matrix)
    real = np.abs(w.imag) <= imag_tol
    if not real.any():
        raise EigenSelectionError("no real eigenvalue available for selection", w)
    cands = np.flatnonzero(real)
    vecs = v[:, cands].real
    norms = np.linalg.norm(vecs, axis=0)
    overlaps = np.abs(vecs[ref]) / norms
    order = np.lexsort((w[cands].real, -np.round(overlaps, 12)))
    k = cands[order[0]]
    vec = v[:, k].real
    vec = vec / np.linalg.norm(vec)
    if vec[ref] < 0:
        vec = -vec
    return float(w[k].real), vec


# ---------------------------------------------------------------------------
# operator algebra
# ---------------------------------------------------------------------------

def commutator(a: DenseOperator, b: DenseOperator) -> DenseOperator:
    _check_same(a, b)
    return DenseOperator(a.space, a.matrix @ b.matrix - b.matrix @ a.matrix)


def nested_commutator(h: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """``[[..[h, g], g].., g]`` with ``k`` commutators."""
    out = h
    for _ in range(k):
        out = out @ g - g @ out
    return out


def similarity_transform(h: DenseOperator, g: DenseOperator, mode: str = "exact",
                         order: int | None = None) -> DenseOperator:
    """``e^{-g} h e^{g}``, exactly or through BCH order ``order``."""
    _check_same(h, g)
    if mode == "exact":
        M = scipy.linalg.expm(-g.matrix) @ h.matrix @ scipy.linalg.expm(g.matrix)
    elif mode == "bch":
        if order is None or order < 0:
            raise ValueError("bch mode needs a nonnegative order")
        M = h.matrix.copy()
        term = h.matrix
        for k in range(1, order + 1):
            term = (term @ g.matrix - g.matrix @ term) / k
            M = M + term
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return DenseOperator(h.space, M, {"operator": f"similarity:{mode}"})


def exp_nilpotent_apply(T: np.ndarray, vec: np.ndarray, max_terms: int = 64) -> np.ndarray:
    """``e^{T} vec`` for a nilpotent (pure excitation) matrix ``T``."""
    out = vec.copy()
    term = vec
    for k in range(1, max_terms):
        term = T @ term / k
        if not np.any(term):
            return out
        out = out + term
    if np.abs(term).max() > 1e-14:
        raise RuntimeError("exponential series did not terminate; operator is not nilpotent")
    return out


# ---------------------------------------------------------------------------
# many-body tensor extraction
# ---------------------------------------------------------------------------

@dataclass
class TensorForm:
    """Scalar + normal-ordered one- and two-body representation of an operator.

    ``one_body[p, q]`` multiplies ``{a+_p a_q}``; ``two_body[p, q, r, s]`` is
    antisymmetric and multiplies ``1/4 {a+_p a+_q a_s a_r}``, both normal
    ordered with respect to the reference.  Indices run over ``orbitals``.
    """

    scalar: float
    one_body: np.ndarray
    two_body: np.ndarray
    residual_norm: float
    orbitals: tuple[int, ...]
    flags: list[str] = field(default_factory=list)

    def vacuum_one_body(self, occupied: Sequence[int]) -> np.ndarray:
        """One-body coefficients of ``a+_p a_q`` after undoing normal ordering."""
        pos = [self.orbitals.index(i) for i in occupied if i in self.orbitals]
        f = self.one_body.copy()
        for k in pos:
            f -= self.two_body[:, k, :, k]
        return f

    def vacuum_scalar(self, occupied: Sequence[int]) -> float:
        pos = [self.orbitals.index(i) for i in occupied if i in self.orbitals]
        e = self.scalar - sum(self.one_body[k, k] for k in pos)
        e += 0.5 * sum(self.two_body[k, l, k, l] for k in pos for l in pos)
        return float(e)


class _NormalOrderedBasis:
    """Matrices of normal-ordered S_z-conserving operators on a space."""

    def __init__(self, space: DeterminantSpace, orbitals: Sequence[int]):
        self.space = space
        self.orbitals = tuple(orbitals)
        occ = {p: (space.reference >> p) & 1 for p in self.orbitals}
        dim = len(space)
        self.one_keys, self.one_mats = [], []
        one = {}
        for p, q in itertools.product(self.orbitals, repeat=2):
            if p % 2 != q % 2:
                continue
            M = np.zeros((dim, dim))
            r, c, s = string_matrix([(p, True), (q, False)], space, project=True)
            M[r, c] = s
            if p == q and occ[p]:
                M -= np.eye(dim)
            one[p, q] = M
            self.one_keys.append((p, q))
            self.one_mats.append(M)
        self.two_keys, self.two_mats = [], []
        zero = np.zeros((dim, dim))
        for (p, q), (r_, s_) in itertools.product(itertools.combinations(self.orbitals, 2), repeat=2):
            if p % 2 + q % 2 != r_ % 2 + s_ % 2:
                continue
            M = np.zeros((dim, dim))
            rr, cc, ss = string_matrix([(p, True), (q, True), (s_, False), (r_, False)], space,
                                       project=True)
            M[rr, cc] = ss
            n_p, n_q = occ[p], occ[q]
            if p == s_ and n_p:
                M += one.get((q, r_), zero)
            if p == r_ and n_p:
                M -= one.get((q, s_), zero)
            if q == s_ and n_q:
                M -= one.get((p, r_), zero)
            if q == r_ and n_q:
                M += one.get((p, s_), zero)
            M -= ((p == r_) * (q == s_) - (p == s_) * (q == r_)) * n_p * n_q * np.eye(dim)
            self.two_keys.append((p, q, r_, s_))
            self.two_mats.append(M)

    @property
    def n_params(self):
        return len(self.one_keys) + len(self.two_keys)

    def design(self, entries: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        rows, cols = entries
        mats = self.one_mats + self.two_mats
        return np.stack([M[rows, cols] for M in mats], axis=1)

    def unpack(self, x: np.ndarray):
        n = len(self.orbitals)
        pos = {p: k for k, p in enumerate(self.orbitals)}
        f = np.zeros((n, n))
        W = np.zeros((n,) * 4)
        for (p, q), val in zip(self.one_keys, x[:len(self.one_keys)]):
            f[pos[p], pos[q]] = val
        for (p, q, r, s), val in zip(self.two_keys, x[len(self.one_keys):]):
            P, Q, R, S = pos[p], pos[q], pos[r], pos[s]
            W[P, Q, R, S] = val
            W[Q, P, R, S] = -val
            W[P, Q, S, R] = -val
            W[Q, P, S, R] = val
        return f, W

    def pack(self, f: np.ndarray, W: np.ndarray) -> np.ndarray:
        pos = {p: k for k, p in enumerate(self.orbitals)}
        one = [f[pos[p], pos[q]] for p, q in self.one_keys]
        two = [W[pos[p], pos[q], pos[r], pos[s]] for p, q, r, s in self.two_keys]
        return np.array(one + two)

    def rebuild(self, scalar: float, f: np.ndarray, W: np.ndarray) -> np.ndarray:
        x = self.pack(f, W)
        M = scalar * np.eye(len(self.space))
        for coef, mat in zip(x, self.one_mats + self.two_mats):
            if coef:
                M += coef * mat
        return M


def rebuild_operator(form: TensorForm, space: DeterminantSpace) -> DenseOperator:
    basis = _NormalOrderedBasis(space, form.orbitals)
    return DenseOperator(space, basis.rebuild(form.scalar, form.one_body, form.two_body))


def reference_tensor_form(h: BareHamiltonian, orbitals: Sequence[int]) -> TensorForm:
    """Normal-ordered tensors of the bare Hamiltonian restricted to ``orbitals``."""
    fock = build_fock(h)
    idx = list(orbitals)
    return TensorForm(fock.reference_energy, fock.f[np.ix_(idx, idx)].copy(),
                      h.v[np.ix_(idx, idx, idx, idx)].copy(), 0.0, tuple(idx))


def extract_tensors(op: DenseOperator, active: ActiveSpace | None = None,
                    max_params: int = 4000, prior: TensorForm | None = None) -> TensorForm:
    """Scalar, one- and two-body tensors of an operator on a CAS space.

    The blocks coupling the reference with singles and doubles, and the
    singles-singles block, are reproduced exactly; the remaining entries
    between determinants of excitation rank <= 2 are fitted in the least
    squares sense.  ``residual_norm`` is the Frobenius norm of the
    difference over the whole space, i.e. the discarded many-body content.

    In a fixed-particle-number space the tensors are not unique (contracted
    two-body pieces can be traded for one-body ones).  Among the admissible
    solutions the one closest to ``prior`` is returned (zero if absent); the
    bare Hamiltonian tensors make a physically meaningful gauge.
    """
    space = op.space
    if active is not None:
        orbitals = active.spinorbs
    else:
        moving = 0
        for d in space.determinants:
            moving |= d ^ space.reference
        orbitals = tuple(p for p in range(space.n_spinorb) if moving >> p & 1)
    flags = []
    ref = space.reference_index
    scalar = float(op.matrix[ref, ref])
    basis = _NormalOrderedBasis(space, orbitals)
    if basis.n_params > max_params:
        raise DimensionCapError(f"{basis.n_params} tensor parameters exceed the cap {max_params}")
    ranks = space.ranks()
    dets = np.array(space.determinants, dtype=object)
    low = np.flatnonzero(ranks <= 2)
    if not np.any(ranks == 2):
        flags.append("no-doubles: two-body block undetermined")
    if not np.any(ranks == 1):
        flags.append("no-singles: one-body block undetermined")
    eq_rows, eq_cols, ls_rows, ls_cols = [], [], [], []
    for i in low:
        for j in low:
            if popcount(int(dets[i]) ^ int(dets[j])) > 4:
                continue
            ri, rj = ranks[i], ranks[j]
            exact = (ri == 0 or rj == 0) or (ri == 1 and rj == 1)
            (eq_rows if exact else ls_rows).append(i)
            (eq_cols if exact else ls_cols).append(j)
    target = op.matrix - scalar * np.eye(len(space))
    x_prior = np.zeros(basis.n_params)
    if prior is not None:
        if tuple(prior.orbitals) != tuple(orbitals):
            raise ValueError("prior tensors use different orbitals")
        x_prior = basis.pack(prior.one_body, prior.two_body)
        target = target - (basis.rebuild(0.0, prior.one_body, prior.two_body))
    A_eq = basis.design((np.array(eq_rows, int), np.array(eq_cols, int)))
    b_eq = target[eq_rows, eq_cols]
    x0, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
    if ls_rows:
        A_ls = basis.design((np.array(ls_rows, int), np.array(ls_cols, int)))
        b_ls = target[ls_rows, ls_cols]
        _, s, vt = np.linalg.svd(A_eq, full_matrices=True)
        rank = int(np.sum(s > s.max(initial=0.0) * 1e-12)) if s.size else 0
        null = vt[rank:].T
        if null.shape[1]:
            z, *_ = np.linalg.lstsq(A_ls @ null, b_ls - A_ls @ x0, rcond=None)
            x0 = x0 + null @ z
    f, W = basis.unpack(x0 + x_prior)
    rebuilt = basis.rebuild(scalar, f, W)
    residual = float(np.linalg.norm(op.matrix - rebuilt))
    if "no-doubles: two-body block undetermined" in flags:
        W = np.zeros((0,) * 4)
    return TensorForm(scalar, f, W, residual, tuple(orbitals), flags)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_operator(op: DenseOperator, stem: str | Path, provenance: dict | None = None) -> tuple[Path, Path]:
    """Write ``stem.bin`` (int64 dimension + row-major float64) and ``stem.json``."""
    stem = Path(stem)
    binpath, jsonpath = stem.with_suffix(".bin"), stem.with_suffix(".json")
    n = len(op.space)
    with open(binpath, "wb") as fh:
        fh.write(np.int64(n).tobytes())
        fh.write(np.ascontiguousarray(op.matrix, dtype="<f8").tobytes())
    desc = {"format": "dense-operator/1", "dimension": n, "dtype": "float64",
            "layout": "row-major", "space": op.space.describe(),
            "provenance": {**op.provenance, **(provenance or {})}}
    jsonpath.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    return binpath, jsonpath


def load_operator(stem: str | Path) -> DenseOperator:
    stem = Path(stem)
    desc = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    n = int(np.frombuffer(raw[:8], dtype="<i8")[0])
    if n != desc["dimension"]:
        raise ValueError("binary dimension disagrees with descriptor")
    M = np.frombuffer(raw[8:], dtype="<f8").reshape(n, n).copy()
    sp = desc["space"]
    space = DeterminantSpace(sp["n_spinorb"], sp["n_elec"], sp["reference"],
                             tuple(sp["determinants"]), sp.get("label", "fci"))
    return DenseOperator(space, M, desc.get("provenance", {}))


