"""Electron integrals: FCIDUMP I/O, spin-orbital Hamiltonian and Fock operator.

Spin orbitals are interleaved: spin orbital ``2p`` is the alpha partner of
spatial orbital ``p`` and ``2p + 1`` the beta partner.  Two-electron
integrals are read in chemists' notation ``(pq|rs)`` and stored in
spin-orbital form as antisymmetrized physicists' integrals ``<pq||rs>``.
"""
from __future__ import annotations

import itertools
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import TextIO

import numpy as np

DUPLICATE_TOL = 1e-10
SYMMETRY_TOL = 1e-12


class FCIDUMPError(ValueError):
    """Raised for malformed or inconsistent FCIDUMP input."""


class FCIDUMPBoundsError(FCIDUMPError):
    pass


class FCIDUMPConsistencyError(FCIDUMPError):
    pass


@dataclass(frozen=True)
class IntegralSet:
    n_spatial: int
    n_elec: int
    ms2: int
    e_core: float
    h_spatial: np.ndarray
    eri_spatial: np.ndarray
    header: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.n_spatial
        if self.h_spatial.shape != (n, n) or self.eri_spatial.shape != (n,) * 4:
            raise ValueError("tensor shapes do not match n_spatial")
        if self.n_elec % 2 or self.ms2 != 0:
            raise ValueError(
                f"closed-shell references only (got NELEC={self.n_elec}, MS2={self.ms2})")
        if not 0 < self.n_elec <= 2 * n:
            raise ValueError(f"NELEC={self.n_elec} does not fit in {n} spatial orbitals")
        self.h_spatial.setflags(write=False)
        self.eri_spatial.setflags(write=False)

    def check_symmetry(self, tol: float = SYMMETRY_TOL) -> None:
        h, g = self.h_spatial, self.eri_spatial
        if np.abs(h - h.T).max(initial=0.0) > tol:
            raise ValueError("h_spatial is not symmetric")
        for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)):
            if np.abs(g - g.transpose(perm)).max(initial=0.0) > tol:
                raise ValueError(f"eri_spatial lacks permutational symmetry {perm}")


@dataclass(frozen=True)
class SpinOrbitalBasis:
    n_spatial: int
    n_elec: int

    @property
    def n_spinorb(self) -> int:
        return 2 * self.n_spatial

    @property
    def n_occ(self) -> int:
        return self.n_elec

    @property
    def occupied(self) -> tuple[int, ...]:
        return tuple(range(self.n_elec))

    @property
    def virtual(self) -> tuple[int, ...]:
        return tuple(range(self.n_elec, self.n_spinorb))

    @property
    def reference_mask(self) -> int:
        return (1 << self.n_elec) - 1

    @property
    def occupied_spatial(self) -> tuple[int, ...]:
        return tuple(range(self.n_elec // 2))

    @property
    def virtual_spatial(self) -> tuple[int, ...]:
        return tuple(range(self.n_elec // 2, self.n_spatial))

    @staticmethod
    def spin(p: int) -> int:
        return p % 2

    @staticmethod
    def spatial(p: int) -> int:
        return p // 2


@dataclass(frozen=True)
class BareHamiltonian:
    basis: SpinOrbitalBasis
    e_core: float
    h: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.h.setflags(write=False)
        self.v.setflags(write=False)

    def check_symmetry(self, tol: float = SYMMETRY_TOL) -> None:
        h, v = self.h, self.v
        if np.abs(h - h.T).max(initial=0.0) > tol:
            raise ValueError("h is not Hermitian")
        if np.abs(v + v.transpose(1, 0, 2, 3)).max(initial=0.0) > tol:
            raise ValueError("v not antisymmetric in the bra pair")
        if np.abs(v + v.transpose(0, 1, 3, 2)).max(initial=0.0) > tol:
            raise ValueError("v not antisymmetric in the ket pair")
        if np.abs(v - v.transpose(2, 3, 0, 1)).max(initial=0.0) > tol:
            raise ValueError("v is not Hermitian")


@dataclass(frozen=True)
class FockOperator:
    f: np.ndarray
    reference_energy: float
    degenerate_frontier: bool = False

    @property
    def orbital_energies(self) -> np.ndarray:
        return np.diag(self.f).copy()


# ---------------------------------------------------------------------------
# FCIDUMP
# ---------------------------------------------------------------------------

_HEADER_END = re.compile(r"(/|&END)\s*$", re.IGNORECASE)
_KEY_VALUE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*([^=]*?)(?=\s*,?\s*[A-Za-z_][A-Za-z0-9_]*\s*=|\s*,?\s*$)")


def _parse_header(lines: list[tuple[int, str]]) -> dict:
    text = " ".join(s for _, s in lines)
    text = re.sub(r"^\s*&FCI", "", text, flags=re.IGNORECASE)
    text = _HEADER_END.sub("", text.strip())
    header = {}
    for key, raw in _KEY_VALUE.findall(text):
        items = [tok for tok in re.split(r"[,\s]+", raw.strip()) if tok]
        values = []
        for tok in items:
            try:
                values.append(int(tok))
            except ValueError:
                try:
                    values.append(float(tok))
                except ValueError:
                    values.append(tok)
        header[key.upper()] = values[0] if len(values) == 1 else values
    return header


def read_fcidump_records(text: str | TextIO):
    """Split FCIDUMP text into ``(header, records)``.

    ``records`` is a list of ``(line_number, value, i, j, k, l)`` with the raw
    1-based indices.  Shared by the plain and the extended readers.
    """
    if not isinstance(text, str):
        text = text.read()
    lines = text.splitlines()
    if not lines or not lines[0].lstrip().upper().startswith("&FCI"):
        raise FCIDUMPError("line 1: header must start with '&FCI'")
    header_lines = []
    body_start = None
    for n, line in enumerate(lines, start=1):
        header_lines.append((n, line))
        if _HEADER_END.search(line.strip()):
            body_start = n
            break
    if body_start is None:
        raise FCIDUMPError(f"line {len(lines)}: header not terminated by '/' or '&END'")
    header = _parse_header(header_lines)
    for key in ("NORB", "NELEC"):
        if not isinstance(header.get(key), int):
            raise FCIDUMPError(f"line 1: header lacks integer {key}")
    header.setdefault("MS2", 0)

    records = []
    for n, line in enumerate(lines[body_start:], start=body_start + 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise FCIDUMPError(f"line {n}: expected 'value i j k l', got {line!r}")
        try:
            value = float(parts[0].replace("D", "E").replace("d", "e"))
            idx = [int(x) for x in parts[1:]]
        except ValueError as exc:
            raise FCIDUMPError(f"line {n}: {exc}") from None
        records.append((n, value, *idx))
    return header, records


def _store(tensor, index, value, line):
    old = tensor[index]
    if not np.isnan(old) and abs(old - value) > DUPLICATE_TOL:
        raise FCIDUMPConsistencyError(
            f"line {line}: value {value!r} conflicts with {old!r} at {tuple(i + 1 for i in index)}")
    tensor[index] = value


def parse_fcidump(text: str | TextIO) -> IntegralSet:
    """Parse FCIDUMP text into an :class:`IntegralSet`.

    Each listed element is copied to all of its permutational partners;
    elements never listed are zero.
    """
    header, records = read_fcidump_records(text)
    norb, nelec, ms2 = header["NORB"], header["NELEC"], header["MS2"]
    if nelec % 2:
        raise FCIDUMPError(f"line 1: odd NELEC={nelec}; closed-shell references only")
    h = np.full((norb, norb), np.nan)
    g = np.full((norb,) * 4, np.nan)
    e_core = None
    for line, value, i, j, k, l in records:
        for x in (i, j, k, l):
            if not 0 <= x <= norb:
                raise FCIDUMPBoundsError(f"line {line}: index {x} outside [0, {norb}]")
        if i and j and k and l:
            p, q, r, s = i - 1, j - 1, k - 1, l - 1
            for idx in {(p, q, r, s), (q, p, r, s), (p, q, s, r), (q, p, s, r),
                        (r, s, p, q), (s, r, p, q), (r, s, q, p), (s, r, q, p)}:
                _store(g, idx, value, line)
        elif i and j and not k and not l:
            for idx in {(i - 1, j - 1), (j - 1, i - 1)}:
                _store(h, idx, value, line)
        elif not (i or j or k or l):
            if e_core is not None and abs(e_core - value) > DUPLICATE_TOL:
                raise FCIDUMPConsistencyError(f"line {line}: second core energy {value!r}")
            e_core = value
        else:
            # orbital-energy lines (i 0 0 0) carry no Hamiltonian information
            continue
    return IntegralSet(
        n_spatial=norb, n_elec=nelec, ms2=ms2, e_core=e_core or 0.0,
        h_spatial=np.nan_to_num(h, nan=0.0), eri_spatial=np.nan_to_num(g, nan=0.0),
        header=header)


def _fmt(value: float) -> str:
    return f"{value:.15e}"  # 16 significant digits


def emit_fcidump(s: IntegralSet, tol: float = 0.0) -> str:
    """Write ``s`` as FCIDUMP text, one symmetry-unique element per line."""
    n = s.n_spatial
    out = [f" &FCI NORB={n},NELEC={s.n_elec},MS2={s.ms2},",
           "  ORBSYM=" + "1," * n,
           "  ISYM=1,",
           " &END"]
    g, h = s.eri_spatial, s.h_spatial
    for p in range(n):
        for q in range(p + 1):
            pq = p * (p + 1) // 2 + q
            for r in range(n):
                for t in range(r + 1):
                    if r * (r + 1) // 2 + t > pq:
                        continue
                    if abs(g[p, q, r, t]) > tol:
                        out.append(f"{_fmt(g[p, q, r, t])} {p + 1:4d} {q + 1:4d} {r + 1:4d} {t + 1:4d}")
    for p in range(n):
        for q in range(p + 1):
            if abs(h[p, q]) > tol:
                out.append(f"{_fmt(h[p, q])} {p + 1:4d} {q + 1:4d}    0    0")
    out.append(f"{_fmt(s.e_core)}    0    0    0    0")
    return "\n".join(out) + "\n"


def load_fcidump(path) -> IntegralSet:
    with open(path) as fh:
        return parse_fcidump(fh)


# ---------------------------------------------------------------------------
# spin-orbital Hamiltonian
# ---------------------------------------------------------------------------

def spin_blocks(n_spatial: int) -> np.ndarray:
    """``spin_blocks(n)[p, q]`` is 1 when spin orbitals p and q share spin."""
    spins = np.arange(2 * n_spatial) % 2
    return (spins[:, None] == spins[None, :]).astype(float)


def to_spinorbital(s: IntegralSet) -> BareHamiltonian:
    n = s.n_spatial
    same = spin_blocks(n)
    idx = np.arange(2 * n) // 2
    h = s.h_spatial[np.ix_(idx, idx)] * same
    # <pq|rs> = (pr|qs) with spin(p)=spin(r), spin(q)=spin(s)
    g = s.eri_spatial[np.ix_(idx, idx, idx, idx)]
    coulomb = g.transpose(0, 2, 1, 3) * same[:, None, :, None] * same[None, :, None, :]
    v = coulomb - coulomb.transpose(0, 1, 3, 2)
    return BareHamiltonian(SpinOrbitalBasis(n, s.n_elec), float(s.e_core), h, v)


def build_fock(hmlt: BareHamiltonian) -> FockOperator:
    occ = list(hmlt.basis.occupied)
    f = hmlt.h + np.einsum("piqi->pq", hmlt.v[:, occ][:, :, :, occ])
    oo = np.ix_(occ, occ)
    e_ref = (hmlt.e_core + np.trace(hmlt.h[oo])
             + 0.5 * np.einsum("ijij->", hmlt.v[np.ix_(occ, occ, occ, occ)]))
    degenerate = False
    basis = hmlt.basis
    if basis.virtual:
        homo, lumo = basis.n_occ - 1, basis.n_occ
        if abs(f[homo, homo] - f[lumo, lumo]) < 1e-8:
            degenerate = True
            warnings.warn("degenerate frontier orbitals: CC denominators may vanish",
                          RuntimeWarning, stacklevel=2)
    return FockOperator(f, float(e_ref), degenerate)


def block_diagonal(a: IntegralSet, b: IntegralSet) -> IntegralSet:
    """Integrals of two non-interacting fragments in one orbital set.

    Orbitals are ordered occupied(a), occupied(b), virtual(a), virtual(b) so
    that the Aufbau reference is the product of both fragment references.
    """
    oa, ob = a.n_elec // 2, b.n_elec // 2
    order = ([("a", p) for p in range(oa)] + [("b", p) for p in range(ob)]
             + [("a", p) for p in range(oa, a.n_spatial)]
             + [("b", p) for p in range(ob, b.n_spatial)])
    n = len(order)
    h = np.zeros((n, n))
    g = np.zeros((n,) * 4)
    src = {"a": a, "b": b}
    for (x, (fx, p)), (y, (fy, q)) in itertools.product(enumerate(order), repeat=2):
        if fx == fy:
            h[x, y] = src[fx].h_spatial[p, q]
    pos = {"a": [], "b": []}
    for x, (frag, p) in enumerate(order):
        pos[frag].append((x, p))
    for frag in ("a", "b"):
        sel = [x for x, _ in sorted(pos[frag], key=lambda t: t[1])]
        g[np.ix_(sel, sel, sel, sel)] = src[frag].eri_spatial
    return IntegralSet(n, a.n_elec + b.n_elec, 0, a.e_core + b.e_core, h, g)


def packaged_systems() -> list[str]:
    """Names of the FCIDUMP files shipped with the package."""
    root = resources.files("ccdownfold") / "data"
    return sorted(p.name[:-len(".fcidump")] for p in root.iterdir() if p.name.endswith(".fcidump"))


def packaged_fcidump(name: str):
    """Path-like handle of a shipped FCIDUMP, e.g. ``packaged_fcidump("lih_sto3g_r3.015")``."""
    ref = resources.files("ccdownfold") / "data" / f"{name}.fcidump"
    if not ref.is_file():
        raise FileNotFoundError(f"no packaged system {name!r}; available: {packaged_systems()}")
    return ref
