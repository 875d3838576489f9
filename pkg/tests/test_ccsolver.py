import random
import warnings

import numpy as np
import pytest

from ccdownfold.ccsolver import (AmplitudeMask, ClusterOperator, DenominatorError, cc_energy, context,
                                 dump_amplitudes, energy_dependent_energy, excitation_signatures,
                                 load_amplitudes, parse_amplitudes, residual_vector, save_amplitudes,
                                 solve_cc)
from ccdownfold.fockspace import build_matrix, enumerate_space, fci_ground
from ccdownfold.integrals import (BareHamiltonian, SpinOrbitalBasis, block_diagonal,
                                  build_fock, load_fcidump, packaged_fcidump, to_spinorbital)

from conftest import ccsd, hamiltonian
from helpers import random_hamiltonian

CCSD_SYSTEMS = ["h2_sto3g_r1.4011", "h4_sto3g_rect2.0x2.5", "h4_sto3g_rect2.0x3.5",
                "h4_sto3g_chain1.8", "h4_sto3g_square0.8", "lih_sto3g_r3.015",
                "lih_sto3g_r4.0", "lih_sto3g_r5.0", "h4_631g_rect2.0x3.0"]


@pytest.mark.parametrize("name", CCSD_SYSTEMS)
def test_ccsd_matches_reference(name, reference):
    res = ccsd(name)
    assert res.converged and res.residual_norm <= 1e-11
    assert res.energy == pytest.approx(reference[name]["ccsd"], abs=1e-8)
    assert res.correlation_energy == pytest.approx(res.energy - reference[name]["rhf"], abs=1e-8)


def test_two_electron_exactness(h2, reference):
    res = solve_cc(h2, AmplitudeMask.ccsd(h2.basis))
    e_fci, _ = fci_ground(build_matrix(h2, enumerate_space(h2.basis)))
    assert abs(res.energy - e_fci) < 1e-10
    assert abs(res.energy - reference["h2_sto3g_r1.4011"]["fci"]) < 1e-9


@pytest.mark.parametrize("seed", [0, 1, 2, 4])
def test_two_electron_exactness_random(seed):
    h = random_hamiltonian(3, 2, seed)
    res = solve_cc(h, AmplitudeMask.ccsd(h.basis), tol=1e-11)
    e_fci, _ = fci_ground(build_matrix(h, enumerate_space(h.basis)))
    assert res.converged and abs(res.energy - e_fci) < 1e-10


def test_no_interaction_limit():
    b = SpinOrbitalBasis(3, 2)
    h = BareHamiltonian(b, 0.1, np.diag([-1.0, -1.0, 0.2, 0.2, 0.9, 0.9]), np.zeros((6,) * 4))
    res = solve_cc(h, AmplitudeMask.ccsd(b))
    assert all(v == 0.0 for v in res.t.values())
    assert res.correlation_energy == 0.0


@pytest.mark.parametrize("name", ["h4_sto3g_rect2.0x2.5", "h4_sto3g_rect2.0x3.5", "h4_sto3g_chain1.8"])
def test_jacobi_and_diis_agree(name):
    h = hamiltonian(name)
    mask = AmplitudeMask.ccsd(h.basis)
    plain = solve_cc(h, mask, tol=1e-11, diis=False, max_iter=2000)
    assert plain.converged
    assert abs(plain.energy - ccsd(name).energy) < 1e-9
    common = [abs(plain.t[s] - ccsd(name).t[s]) for s in mask]
    assert max(common) < 1e-8


def test_square_geometry_roots(reference):
    """Near-degenerate square H4: DIIS root and a second root found by Newton."""
    name = "h4_sto3g_square0.8"
    h = hamiltonian(name)
    mask = AmplitudeMask.ccsd(h.basis)
    res = ccsd(name)
    assert res.energy == pytest.approx(reference[name]["ccsd"], abs=1e-8)
    eqs = context(h).equations(list(mask))
    t0 = np.array([res.t[s] for s in mask])
    t, e, rnorm, _, ok, _ = eqs.solve_newton(t0, tol=1e-10)
    assert ok and abs(e - res.energy) < 1e-9
    t, e2, rnorm, _, ok, _ = eqs.solve_newton(tol=1e-10)
    assert ok and rnorm < 1e-10
    second = ClusterOperator(h.basis, dict(zip(mask, t)))
    assert max(abs(v) for v in residual_vector(h, second, mask).values()) < 1e-10
    assert abs(e2 - res.energy) > 1e-3


def test_cc_energy_consistency(h2, h4, h4_ccsd):
    assert cc_energy(h4, ClusterOperator(h4.basis)) == pytest.approx(
        build_fock(h4).reference_energy, abs=1e-12)
    assert cc_energy(h4, h4_ccsd.t) == pytest.approx(h4_ccsd.energy, abs=1e-12)
    res = solve_cc(h2, AmplitudeMask.ccsd(h2.basis))
    assert cc_energy(h2, res.t) == pytest.approx(res.energy, abs=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_connected_and_energy_dependent_forms_agree(h4, seed):
    rng = np.random.default_rng(seed)
    t = ClusterOperator(h4.basis, {s: 0.2 * rng.normal() for s in excitation_signatures(h4.basis, 2)})
    assert abs(cc_energy(h4, t) - energy_dependent_energy(h4, t)) < 1e-12


def test_residual_at_solution(h4, h4_ccsd):
    r = residual_vector(h4, h4_ccsd.t, AmplitudeMask.ccsd(h4.basis))
    assert max(abs(v) for v in r.values()) <= 1e-11


def test_zero_amplitude_residual_is_integral(h4, h4_fock):
    r = residual_vector(h4, ClusterOperator(h4.basis), AmplitudeMask.ccsd(h4.basis))
    for (occ, virt), val in r.items():
        if len(occ) == 2:
            (i, j), (a, b) = occ, virt
            assert val == pytest.approx(h4.v[i, j, a, b], abs=1e-13)
        else:
            assert val == pytest.approx(h4_fock.f[virt[0], occ[0]], abs=1e-13)


def test_residual_order_invariance(h4, h4_ccsd):
    sigs = excitation_signatures(h4.basis, 2)
    shuffled = list(sigs)
    random.Random(0).shuffle(shuffled)
    r1 = residual_vector(h4, h4_ccsd.t, AmplitudeMask.of(sigs))
    r2 = residual_vector(h4, h4_ccsd.t, AmplitudeMask.of(shuffled))
    assert r1 == r2
    t = ClusterOperator(h4.basis, dict(reversed(list(h4_ccsd.t.items()))))
    assert residual_vector(h4, t, AmplitudeMask.of(sigs)) == r1


def test_masked_solution_property(h4):
    sigs = [s for s in excitation_signatures(h4.basis, 2) if max(s[1]) < 6]
    mask = AmplitudeMask.of(sigs, h4.basis)
    res = solve_cc(h4, mask, tol=1e-11)
    assert set(res.t) == set(sigs)
    r = residual_vector(h4, res.t, mask)
    assert max(abs(v) for v in r.values()) < 1e-11
    full = residual_vector(h4, res.t, AmplitudeMask.ccsd(h4.basis))
    assert max(abs(v) for s, v in full.items() if s not in mask.signatures) > 1e-4


def test_additive_separability(h2):
    s = load_fcidump(packaged_fcidump("h2_sto3g_r1.4011"))
    pair = to_spinorbital(block_diagonal(s, s))
    single = solve_cc(h2, AmplitudeMask.ccsd(h2.basis), tol=1e-11)
    double = solve_cc(pair, AmplitudeMask.ccsd(pair.basis), tol=1e-11)
    assert abs(double.correlation_energy - 2 * single.correlation_energy) < 1e-9


def test_empty_mask_rejected(h4):
    with pytest.raises(ValueError, match="empty"):
        solve_cc(h4, AmplitudeMask.of([]))


def test_non_convergence_reported(h4):
    res = solve_cc(h4, AmplitudeMask.ccsd(h4.basis), max_iter=2)
    assert not res.converged and res.iterations == 2 and res.residual_norm > 1e-9


def test_degenerate_denominator_names_orbitals():
    b = SpinOrbitalBasis(2, 2)
    v = np.zeros((4,) * 4)
    v[0, 1, 2, 3] = v[2, 3, 0, 1] = 0.1
    v[1, 0, 3, 2] = v[3, 2, 1, 0] = 0.1
    v[1, 0, 2, 3] = v[0, 1, 3, 2] = v[2, 3, 1, 0] = v[3, 2, 0, 1] = -0.1
    h = BareHamiltonian(b, 0.0, -np.eye(4), v)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(DenominatorError, match=r"occupied \(0,\) -> virtual \(2,\)"):
            solve_cc(h, AmplitudeMask.ccsd(b))


def test_cluster_operator_invariants():
    b = SpinOrbitalBasis(3, 2)
    with pytest.raises(ValueError):
        ClusterOperator(b, {((0,), (3,)): 0.1})  # spin flip
    with pytest.raises(ValueError):
        ClusterOperator(b, {((1, 0), (2, 3)): 0.1})  # unsorted
    with pytest.raises(ValueError):
        ClusterOperator(b, {((0,), (1,)): 0.1})  # occupied index as virtual
    with pytest.raises(ValueError):
        ClusterOperator(b, {((0, 1), (2, 3)): 0.1}, rank=1)
    t = ClusterOperator(b, {((0,), (2,)): 0.1, ((0, 1), (2, 5)): -0.2})
    assert t.max_rank() == 2 and len(t) == 2


def test_amplitude_dump_round_trip(tmp_path, h4, h4_ccsd):
    text = dump_amplitudes(h4_ccsd.t)
    first = text.splitlines()[0].split()
    assert first[0] == "1" and len(first) == 4
    mantissa = first[-1].split("e")[0].lstrip("-").replace(".", "")
    assert len(mantissa) == 16
    save_amplitudes(h4_ccsd.t, tmp_path / "t.txt")
    back = load_amplitudes(tmp_path / "t.txt", h4.basis)
    assert set(back) == set(h4_ccsd.t)
    assert max(abs(back[s] - h4_ccsd.t[s]) for s in back) < 1e-15
    with pytest.raises(ValueError, match="line 1"):
        parse_amplitudes("2 0 1 4\n", h4.basis)
