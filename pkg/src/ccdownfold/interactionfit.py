"""Fitting parametric one- and two-body interactions to downfolded tensors.

Orbitals live on a 1D quadrature grid.  For a family ``u(gamma; x)`` the
one-body tensor is ``u[P, Q] = sum_k w_k phi_P(x_k) u(x_k) phi_Q(x_k)``; for
``g(delta; r)`` the two-body tensor is

    g[P, Q, R, S] = sum_kl w_k w_l phi_R(x_k) phi_S(x_l) g(|x_k - x_l|) phi_P(x_k) phi_Q(x_l)

Parameters are fitted by minimizing the L1 discrepancy with the target
tensors using a bounded, derivative-free pattern search.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, eval_hermite

from .fockspace import TensorForm
from .integrals import IntegralSet

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 10_000
ORTHONORMALITY_TOL = 1e-6


class UnsupportedFamilyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OrbitalGrid:
    x: np.ndarray
    w: np.ndarray
    phi: np.ndarray      # (n_orb, n_points)

    def __post_init__(self):
        if self.phi.ndim != 2 or self.phi.shape[1] != len(self.x) or len(self.w) != len(self.x):
            raise ValueError("orbital table does not match the grid")
        if np.any(self.w <= 0):
            raise ValueError("quadrature weights must be positive")
        err = np.abs(self.overlap() - np.eye(self.n_orb)).max()
        if err > ORTHONORMALITY_TOL:
            raise ValueError(f"orbitals are not orthonormal on the grid (max error {err:.2e})")

    @property
    def n_orb(self) -> int:
        return self.phi.shape[0]

    def overlap(self) -> np.ndarray:
        return (self.phi * self.w) @ self.phi.T

    def subset(self, orbitals: Sequence[int]) -> "OrbitalGrid":
        return OrbitalGrid(self.x, self.w, self.phi[list(orbitals)])

    @classmethod
    def harmonic(cls, n_orb: int, n_points: int = 201, half_width: float = 10.0,
                 omega: float = 1.0) -> "OrbitalGrid":
        """Oscillator eigenfunctions on a uniform trapezoid grid."""
        x = np.linspace(-half_width, half_width, n_points)
        w = np.full(n_points, x[1] - x[0])
        w[0] = w[-1] = 0.5 * w[0]
        xi = math.sqrt(omega) * x
        phi = np.array([(omega / math.pi) ** 0.25 / math.sqrt(2.0 ** n * math.factorial(n))
                        * eval_hermite(n, xi) * np.exp(-0.5 * xi ** 2) for n in range(n_orb)])
        return cls(x, w, phi)


def save_grid(grid: OrbitalGrid, path) -> None:
    """Text table, one grid point per line: ``x  w  phi_0 ... phi_{n-1}``."""
    table = np.column_stack([grid.x, grid.w, grid.phi.T])
    np.savetxt(path, table, fmt="%.17e", header=f"x w phi_0..phi_{grid.n_orb - 1}")


def load_grid(path) -> OrbitalGrid:
    try:
        table = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed orbital table ({exc})") from None
    if table.shape[1] < 3:
        raise ValueError(f"{path}: need x, w and at least one orbital column")
    return OrbitalGrid(table[:, 0].copy(), table[:, 1].copy(), table[:, 2:].T.copy())


# ---------------------------------------------------------------------------
# functional families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Family:
    name: str
    kind: str                      # "u" (one-body) or "g" (two-body)
    arity: int
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lower: tuple
    upper: tuple
    description: str
    needs_gradient: bool = False


def _erf_over_r(p, r):
    a, b = p
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, a * erf(b * safe) / safe, a * 2.0 * b / math.sqrt(math.pi))


def _yukawa_soft(p, r):
    a, b = p
    rho = np.sqrt(r * r + 1.0)
    return a * np.exp(-b * rho) / rho


FAMILIES: dict[str, Family] = {}


def register(family: Family) -> Family:
    if family.kind not in ("u", "g"):
        raise ValueError("family kind must be 'u' or 'g'")
    FAMILIES[family.name] = family
    return family


register(Family("poly_r2", "u", 2, lambda p, x: p[0] + p[1] * x * x,
                (-100.0, -100.0), (100.0, 100.0), "gamma0 + gamma1 x^2"))
register(Family("erf_coulomb", "g", 2, _erf_over_r, (0.0, 1e-3), (100.0, 100.0),
                "delta0 erf(delta1 r) / r"))
register(Family("yukawa", "g", 2, _yukawa_soft, (0.0, 0.0), (100.0, 50.0),
                "delta0 exp(-delta1 rho) / rho with rho = sqrt(r^2 + 1)"))
register(Family("soft_coulomb", "g", 2, lambda p, r: p[0] / np.sqrt(r * r + p[1] * p[1]),
                (0.0, 1e-3), (100.0, 100.0), "delta0 / sqrt(r^2 + delta1^2)"))


def get_family(name: str) -> Family:
    try:
        fam = FAMILIES[name]
    except KeyError:
        raise UnsupportedFamilyError(f"unknown family {name!r}; known: {sorted(FAMILIES)}") from None
    if fam.needs_gradient:
        raise UnsupportedFamilyError(f"family {name!r} needs derivative operators")
    return fam


@dataclass
class InteractionModel:
    family: str
    params: np.ndarray

    def __post_init__(self):
        fam = get_family(self.family)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (fam.arity,):
            raise ValueError(f"family {self.family} takes {fam.arity} parameters")

    @property
    def spec(self) -> Family:
        return get_family(self.family)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": [float(p) for p in self.params],
                "description": self.spec.description}


# ---------------------------------------------------------------------------
# tensors on a grid
# ---------------------------------------------------------------------------

class _GridKernel:
    """Precomputed pair densities and distances for repeated evaluation."""

    def __init__(self, grid: OrbitalGrid):
        self.grid = grid
        n, K = grid.phi.shape
        self.pair = (grid.phi[:, None, :] * grid.phi[None, :, :] * grid.w).reshape(n * n, K)
        self.r = np.abs(grid.x[:, None] - grid.x[None, :])

    def u(self, model: InteractionModel) -> np.ndarray:
        n = self.grid.n_orb
        vals = model.spec.func(model.params, self.grid.x)
        return (self.pair @ vals).reshape(n, n)

    def g(self, model: InteractionModel) -> np.ndarray:
        n = self.grid.n_orb
        G = model.spec.func(model.params, self.r)
        G = 0.5 * (G + G.T)
        # (P R) x (Q S) -> P Q R S
        full = (self.pair @ G @ self.pair.T).reshape(n, n, n, n).transpose(0, 2, 1, 3)
        return 0.5 * (full + full.transpose(1, 0, 3, 2))


def eval_u(model: InteractionModel, grid: OrbitalGrid) -> np.ndarray:
    if model.spec.kind != "u":
        raise UnsupportedFamilyError(f"{model.family} is a two-body family")
    return _GridKernel(grid).u(model)


def eval_g(model: InteractionModel, grid: OrbitalGrid) -> np.ndarray:
    if model.spec.kind != "g":
        raise UnsupportedFamilyError(f"{model.family} is a one-body family")
    return _GridKernel(grid).g(model)


@dataclass
class ChiTensors:
    """Spin-free targets: ``one_body[P, Q]`` and non-antisymmetrized ``two_body[P, Q, R, S]``."""
    one_body: np.ndarray
    two_body: np.ndarray
    orbitals: tuple = ()

    def __post_init__(self):
        self.one_body = np.asarray(self.one_body, dtype=float)
        self.two_body = np.asarray(self.two_body, dtype=float)
        n = self.one_body.shape[0]
        if self.one_body.shape != (n, n) or self.two_body.shape != (n,) * 4:
            raise ValueError("chi tensors have inconsistent shapes")
        if np.abs(self.one_body - self.one_body.T).max(initial=0.0) > 1e-8:
            raise ValueError("one-body chi is not symmetric")
        if np.abs(self.two_body - self.two_body.transpose(1, 0, 3, 2)).max(initial=0.0) > 1e-8:
            raise ValueError("two-body chi lacks the pair-swap symmetry")

    @property
    def n_orb(self) -> int:
        return self.one_body.shape[0]


def chi_from_tensor_form(form: TensorForm, occupied: Sequence[int]) -> tuple[ChiTensors, float]:
    """Spatial chi tensors from a spin-orbital tensor form.

    Returns the tensors and the largest asymmetry removed by symmetrization.
    The one-body part is taken from the alpha block of the vacuum one-body
    operator, the two-body part from the alpha-beta block of ``W``.
    """
    pos = {p: k for k, p in enumerate(form.orbitals)}
    spatial = sorted({p // 2 for p in form.orbitals})
    if any(2 * P not in pos or 2 * P + 1 not in pos for P in spatial):
        raise ValueError("tensor form does not cover both spins of every orbital")
    a = [pos[2 * P] for P in spatial]
    b = [pos[2 * P + 1] for P in spatial]
    h1 = form.vacuum_one_body(occupied)[np.ix_(a, a)]
    W = form.two_body
    if W.size == 0:
        raise ValueError("tensor form has no two-body block")
    # g[P, Q, R, S] = <R S | P Q> = W[R_a, S_b, P_a, Q_b]
    g = W[np.ix_(a, b, a, b)].transpose(2, 3, 0, 1)
    asym = max(float(np.abs(h1 - h1.T).max()),
               float(np.abs(g - g.transpose(1, 0, 3, 2)).max()),
               float(np.abs(g - g.transpose(2, 3, 0, 1)).max()))
    h1 = 0.5 * (h1 + h1.T)
    g = 0.5 * (g + g.transpose(1, 0, 3, 2))
    g = 0.5 * (g + g.transpose(2, 3, 0, 1))
    return ChiTensors(h1, g, tuple(spatial)), asym


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    x: np.ndarray
    fx: float
    history: list
    evaluations: int
    converged: bool


def pattern_search(f: Callable[[np.ndarray], float], x0, lower, upper,
                   budget: int = DEFAULT_BUDGET, step_tol: float = 1e-13,
                   seed: int = 0) -> SearchResult:
    """Bounded opportunistic pattern search.

    Polls +/- along an orthonormal frame; a successful poll doubles the step,
    a failed one halves it and draws a new random frame.
    """
    rng = np.random.default_rng(seed)
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    x = np.clip(np.asarray(x0, float), lower, upper)
    scale = np.maximum(np.abs(x), 1e-2)
    n = len(x)
    fx = f(x)
    evals = 1
    history = [fx]
    frame = np.eye(n)
    step = 0.1
    converged = False
    while evals < budget:
        moved = False
        for d in np.concatenate([frame, -frame]):
            y = np.clip(x + step * scale * d, lower, upper)
            if np.array_equal(y, x):
                continue
            fy = f(y)
            evals += 1
            if fy < fx:
                x, fx, moved = y, fy, True
                break
            if evals >= budget:
                break
        history.append(fx)
        if moved:
            step = min(2.0 * step, 1.0)
        else:
            step *= 0.5
            q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            frame = q.T
            if step < step_tol:
                converged = True
                break
    return SearchResult(x, float(fx), history, evals, converged)


@dataclass
class FitResult:
    model: InteractionModel
    objective: float
    initial_objective: float
    history: list
    residuals: np.ndarray
    converged: bool
    evaluations: int
    warnings: list = field(default_factory=list)

    def report(self) -> dict:
        res = np.abs(self.residuals)
        return {"model": self.model.to_dict(), "objective": self.objective,
                "initial_objective": self.initial_objective, "converged": self.converged,
                "evaluations": self.evaluations, "warnings": list(self.warnings),
                "residual_max": float(res.max(initial=0.0)),
                "residual_mean": float(res.mean()) if res.size else 0.0}


def _degenerate_parameters(obj, x, fam: Family) -> list[int]:
    fx = obj(x)
    flat = []
    lo, hi = np.asarray(fam.lower), np.asarray(fam.upper)
    for i in range(len(x)):
        h = 1e-3 * (hi[i] - lo[i])
        changes = []
        for s in (-1, 1):
            y = x.copy()
            y[i] = np.clip(y[i] + s * h, lo[i], hi[i])
            if y[i] != x[i]:
                changes.append(abs(obj(y) - fx))
        if changes and max(changes) <= 1e-12 * max(1.0, fx):
            flat.append(i)
    return flat


def fit_interaction(chi: ChiTensors, grid: OrbitalGrid, family: str, init,
                    budget: int = DEFAULT_BUDGET, seed: int = 0) -> FitResult:
    """L1 fit of a one-body (``u``) or two-body (``g``) family to ``chi``."""
    fam = get_family(family)
    if grid.n_orb != chi.n_orb:
        raise ValueError(f"grid carries {grid.n_orb} orbitals, chi tensors {chi.n_orb}")
    kernel = _GridKernel(grid)
    target = chi.one_body if fam.kind == "u" else chi.two_body
    evaluate = kernel.u if fam.kind == "u" else kernel.g

    def model_of(p):
        return InteractionModel(family, p)

    def obj(p):
        return float(np.abs(evaluate(model_of(p)) - target).sum())

    x0 = np.asarray(init, float)
    f0 = obj(np.clip(x0, fam.lower, fam.upper))
    res = pattern_search(obj, x0, fam.lower, fam.upper, budget=budget, seed=seed)
    warns = []
    if not res.converged:
        warns.append(f"budget of {budget} evaluations exhausted; returning best parameters so far")
    flat = _degenerate_parameters(obj, res.x, fam)
    if flat:
        warns.append(f"objective is flat in parameter(s) {flat}: family is degenerate for this target")
    for w in warns:
        log.warning("%s fit: %s", family, w)
    best = model_of(res.x)
    return FitResult(best, res.fx, f0, res.history, evaluate(best) - target, res.converged,
                     res.evaluations, warns)


# ---------------------------------------------------------------------------
# a 1D soft-Coulomb chain whose orbitals live on the grid
# ---------------------------------------------------------------------------

def soft_coulomb_chain(n_atoms: int = 4, spacing: float = 2.0, n_orb: int = 6,
                       n_elec: int | None = None, dx: float = 0.1, margin: float = 10.0,
                       softening: float = 1.0, scf_tol: float = 1e-10, max_iter: int = 500):
    """Restricted Hartree-Fock for a 1D chain with soft-Coulomb interactions.

    Returns the integrals over the ``n_orb`` lowest orbitals and the grid
    carrying those orbitals.  Electron repulsion is ``1/sqrt(r^2 + softening^2)``,
    so the bare two-body tensor equals the ``soft_coulomb`` family at
    ``(1, softening)``.
    """
    n_elec = n_atoms if n_elec is None else n_elec
    if n_elec % 2:
        raise ValueError("closed-shell chain needs an even electron count")
    centers = (np.arange(n_atoms) - 0.5 * (n_atoms - 1)) * spacing
    half = 0.5 * (n_atoms - 1) * spacing + margin
    x = np.arange(-half, half + 0.5 * dx, dx)
    K = len(x)
    soft = lambda r: 1.0 / np.sqrt(r * r + softening ** 2)
    v_ext = -sum(soft(x - c) for c in centers)
    e_nuc = sum(soft(centers[i] - centers[j]) for i in range(n_atoms) for j in range(i))
    lap = (np.diag(np.full(K, -2.0)) + np.diag(np.ones(K - 1), 1) + np.diag(np.ones(K - 1), -1)) / dx ** 2
    h = -0.5 * lap + np.diag(v_ext)
    G = soft(x[:, None] - x[None, :])
    n_occ = n_elec // 2
    _, C = np.linalg.eigh(h)
    P = C[:, :n_occ] @ C[:, :n_occ].T
    energy = np.inf
    for it in range(max_iter):
        F = h + np.diag(2.0 * G @ np.diag(P)) - G * P
        eps, C = np.linalg.eigh(F)
        P_new = C[:, :n_occ] @ C[:, :n_occ].T
        e_new = float(np.sum(P_new * (h + F))) + e_nuc
        change = np.abs(P_new - P).max()
        P = 0.5 * (P + P_new) if change > 1e-3 else P_new
        if change < scf_tol and abs(e_new - energy) < scf_tol:
            break
        energy = e_new
    else:
        raise RuntimeError("chain SCF did not converge")
    C = C[:, :n_orb]
    for k in range(n_orb):
        if C[np.argmax(np.abs(C[:, k])), k] < 0:
            C[:, k] *= -1
    h_mo = C.T @ h @ C
    pair = (C[:, :, None] * C[:, None, :]).reshape(K, n_orb * n_orb)
    eri = (pair.T @ G @ pair).reshape(n_orb, n_orb, n_orb, n_orb)
    ints = IntegralSet(n_orb, n_elec, 0, float(e_nuc), h_mo, eri,
                       {"model": "soft-coulomb-chain", "n_atoms": n_atoms, "spacing": spacing})
    grid = OrbitalGrid(x, np.full(K, dx), C.T / math.sqrt(dx))
    return ints, grid
