"""Quantum flow: coupled SES active-space problems sharing one amplitude pool.

Each sweep visits the active spaces in order.  For active space ``h_i`` the
pooled amplitudes outside its internal set are folded into
``H_eff(h_i)``; the internal amplitudes are then re-solved from the masked
amplitude equations written on the CAS with that effective Hamiltonian, and
written back to the pool immediately.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ccsolver import (AmplitudeMask, ClusterOperator, MaskedEquations, _check_denominators,
                       cc_energy, context, excitation_signatures, fock_denominator)
from .fockspace import ActiveSpace, eig_nonhermitian, excitation_cache
from .integrals import BareHamiltonian
from .ses import build_heff_ses, is_ses, partition

log = logging.getLogger(__name__)


class FlowSpecError(ValueError):
    pass


@dataclass
class FlowSpec:
    active_spaces: list[ActiveSpace]
    tol: float = 1e-10
    max_sweeps: int = 200
    rank: int = 2
    schedule: str = "cyclic"
    relaxation: float = 1.0
    inner_tol: float = 1e-12

    def __post_init__(self):
        if not self.active_spaces:
            raise FlowSpecError("flow needs at least one active space")
        if self.schedule != "cyclic":
            raise FlowSpecError(f"unsupported schedule {self.schedule!r}")


@dataclass
class FlowState:
    pool: ClusterOperator
    sub_energies: list[float]
    sweep: int = 0
    converged: bool = False
    relaxation: float = 1.0
    trajectory: list[dict] = field(default_factory=list)
    cas_dims: list[int] = field(default_factory=list)
    internal_sets: list[list] = field(default_factory=list)


def internal_signatures(h: BareHamiltonian, active: ActiveSpace, rank: int):
    return excitation_signatures(h.basis, rank, active.spinorbs)


def union_mask(h: BareHamiltonian, spec: FlowSpec) -> AmplitudeMask:
    sigs = set()
    for act in spec.active_spaces:
        sigs.update(internal_signatures(h, act, spec.rank))
    return AmplitudeMask.of(sigs)


def _solve_subproblem(h, pool: dict, active: ActiveSpace, sigs, rank, tol):
    t_all = ClusterOperator(h.basis, pool, rank)
    _, t_ext = partition(t_all, active)
    heff = build_heff_ses(h, t_ext, active)
    cas = heff.cas_space
    cache = excitation_cache(cas)
    eps = context(h).fock.orbital_energies
    denoms = np.array([fock_denominator(s, eps) for s in sigs])
    _check_denominators(sigs, denoms)
    eqs = MaskedEquations(heff.matrix.matrix, cas.reference_index,
                          [cache.get(s) for s in sigs], denoms, sigs)
    t0 = np.array([pool.get(s, 0.0) for s in sigs])
    t, _, rnorm, it, ok, _ = eqs.solve(t0, tol=tol, max_iter=500)
    if not ok:
        log.warning("flow subproblem %s not converged (|R| = %.2e)", active, rnorm)
    return t, heff


def run_flow(h: BareHamiltonian, spec: FlowSpec) -> tuple[float, FlowState]:
    for act in spec.active_spaces:
        check = is_ses(act, h.basis, spec.rank)
        if not check:
            raise FlowSpecError(f"active space {act} is not an SES: {check.explanation}")
    sets = [internal_signatures(h, act, spec.rank) for act in spec.active_spaces]
    pool: dict = {s: 0.0 for sigs in sets for s in sigs}
    state = FlowState(ClusterOperator(h.basis, pool, spec.rank), [np.nan] * len(sets),
                      relaxation=spec.relaxation, internal_sets=sets)
    signs_of_change: list[float] = []
    last_energy = cc_energy(h, state.pool)
    for sweep in range(1, spec.max_sweeps + 1):
        max_change = 0.0
        dims = []
        for k, (act, sigs) in enumerate(zip(spec.active_spaces, sets)):
            t_new, heff = _solve_subproblem(h, pool, act, sigs, spec.rank, spec.inner_tol)
            for s, val in zip(sigs, t_new):
                upd = pool[s] + state.relaxation * (val - pool[s])
                max_change = max(max_change, abs(upd - pool[s]))
                pool[s] = upd
            state.sub_energies[k] = eig_nonhermitian(heff.matrix)[0]
            dims.append(heff.dimension)
        state.pool = ClusterOperator(h.basis, pool, spec.rank)
        energy = cc_energy(h, state.pool)
        state.sweep = sweep
        state.cas_dims = dims
        state.trajectory.append({"sweep": sweep, "energy": energy, "max_change": max_change,
                                 "sub_energies": list(state.sub_energies)})
        log.info("flow sweep %d  E = %.12f  max dt = %.3e", sweep, energy, max_change)
        signs_of_change.append(np.sign(energy - last_energy))
        last_energy = energy
        if (state.relaxation > 0.5 and len(signs_of_change) >= 4
                and all(signs_of_change[-i] == -signs_of_change[-i - 1] != 0 for i in range(1, 4))):
            log.info("energy oscillation detected; under-relaxing to 0.5")
            state.relaxation = 0.5
        if max_change < spec.tol:
            state.converged = True
            break
    return cc_energy(h, state.pool), state


def flow_report(state: FlowState) -> dict:
    energies = [row["energy"] for row in state.trajectory]
    diffs = np.diff(energies)
    monotone = bool(np.all(diffs <= 1e-14) or np.all(diffs >= -1e-14))
    return {
        "converged": state.converged,
        "sweeps": state.sweep,
        "relaxation": state.relaxation,
        "final_energy": energies[-1] if energies else None,
        "final_max_change": state.trajectory[-1]["max_change"] if state.trajectory else None,
        "monotone": monotone,
        "cas_dimensions": list(state.cas_dims),
        "sub_energies": list(state.sub_energies),
        "n_pooled_amplitudes": len(state.pool),
        "trajectory": [{"sweep": r["sweep"], "energy": r["energy"], "max_change": r["max_change"]}
                       for r in state.trajectory],
    }
