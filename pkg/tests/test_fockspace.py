import itertools
from math import comb

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from ccdownfold.ccsolver import ClusterOperator
from ccdownfold.fockspace import (ActiveSpace, DenseOperator, DeterminantSpace, EigenSelectionError,
                                  SpaceError, annihilate, apply_string, brute_force_hamiltonian,
                                  build_matrix, cluster_matrix, commutator, create, eig_nonhermitian,
                                  enumerate_space, exp_nilpotent_apply, extract_tensors, fci_ground,
                                  identity, load_operator, nested_commutator, rebuild_operator,
                                  reference_tensor_form, save_operator, similarity_transform)
from ccdownfold.integrals import SpinOrbitalBasis, build_fock

from conftest import hamiltonian
from helpers import random_hamiltonian


def test_create_annihilate_signs():
    assert annihilate(0b0101, 2) == (-1, 0b0001)
    assert annihilate(0b0101, 1) is None
    assert create(0b0101, 1) == (-1, 0b0111)
    assert create(0b0101, 3) == (1, 0b1101)
    assert apply_string(0b0011, [(2, True), (0, False)]) == (-1, 0b0110)


def test_small_space_count():
    space = enumerate_space(SpinOrbitalBasis(2, 2))
    assert len(space) == 4
    assert set(space.determinants) == {0b0011, 0b1001, 0b0110, 0b1100}


def test_rank_zero_is_reference():
    b = SpinOrbitalBasis(4, 4)
    space = enumerate_space(b, max_rank=0)
    assert space.determinants == (b.reference_mask,)


@pytest.mark.parametrize("n_spatial, n_elec", [(4, 4), (4, 2), (6, 4), (3, 6)])
def test_space_size_binomial(n_spatial, n_elec):
    space = enumerate_space(SpinOrbitalBasis(n_spatial, n_elec))
    assert len(space) == comb(n_spatial, n_elec // 2) ** 2
    brute = [d for d in range(1 << 2 * n_spatial)
             if bin(d & 0x5555).count("1") == n_elec // 2 and bin(d & 0xAAAA).count("1") == n_elec // 2]
    assert sorted(brute) == list(space.determinants)


def test_active_space_restriction():
    b = SpinOrbitalBasis(4, 4)
    act = ActiveSpace((1,), (2, 3))
    space = enumerate_space(b, active=act)
    assert len(space) == 9
    for d in space.determinants:
        assert (d ^ b.reference_mask) & ~act.mask == 0


def test_rank_bound():
    b = SpinOrbitalBasis(4, 4)
    space = enumerate_space(b, max_rank=2)
    assert space.ranks().max() == 2
    assert len(space) == 1 + 8 + 18


def test_empty_space_rejected():
    with pytest.raises(SpaceError):
        DeterminantSpace(4, 2, 0b11, ())
    with pytest.raises(SpaceError):
        enumerate_space(SpinOrbitalBasis(1, 2), n_elec=4)


def test_diagonal_one_body_matrix():
    b = SpinOrbitalBasis(2, 2)
    from ccdownfold.integrals import BareHamiltonian
    eps = np.array([-1.0, -1.0, 0.3, 0.3])
    h = BareHamiltonian(b, 0.25, np.diag(eps), np.zeros((4,) * 4))
    space = enumerate_space(b)
    M = build_matrix(h, space).matrix
    expect = [0.25 + sum(eps[p] for p in range(4) if d >> p & 1) for d in space.determinants]
    np.testing.assert_allclose(M, np.diag(expect), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(n_spatial=st.integers(1, 4), half=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_slater_condon_matches_brute_force(n_spatial, half, seed):
    n_elec = 2 * min(half, n_spatial)
    h = random_hamiltonian(n_spatial, n_elec, seed)
    space = enumerate_space(h.basis)
    M = build_matrix(h, space).matrix
    np.testing.assert_allclose(M, brute_force_hamiltonian(h, space), atol=1e-12, rtol=0)
    assert np.abs(M - M.T).max() < 1e-12


def test_slater_condon_exhaustive_8_spinorb():
    """Every electron count and every S_z sector of an 8-spin-orbital basis."""
    h = random_hamiltonian(4, 4, 7)
    for n_el in range(0, 9):
        for n_alpha in range(0, n_el + 1):
            dets = tuple(sorted(d for d in range(256) if bin(d).count("1") == n_el
                                and bin(d & 0x55).count("1") == n_alpha))
            if not dets:
                continue
            space = DeterminantSpace(8, n_el, dets[0], dets)
            np.testing.assert_allclose(build_matrix(h, space).matrix,
                                       brute_force_hamiltonian(h, space), atol=1e-12, rtol=0)


def test_single_excitation_element(h4):
    space = enumerate_space(h4.basis)
    M = build_matrix(h4, space).matrix
    fock = build_fock(h4)
    ref = h4.basis.reference_mask
    # <Phi_i^a|H|Phi> = f_ai for single excitations of the reference
    for i in h4.basis.occupied:
        for a in h4.basis.virtual:
            if (i - a) % 2:
                continue
            sign, det = apply_string(ref, [(a, True), (i, False)])
            assert M[space.index[det], space.reference_index] == pytest.approx(
                sign * fock.f[a, i], abs=1e-13)


def test_beyond_double_excitations_zero(h4):
    space = enumerate_space(h4.basis)
    M = build_matrix(h4, space).matrix
    for (x, dx), (y, dy) in itertools.combinations(enumerate(space.determinants), 2):
        if bin(dx ^ dy).count("1") > 4:
            assert M[x, y] == 0.0


def test_cluster_single_amplitude_sign():
    b = SpinOrbitalBasis(2, 2)
    space = enumerate_space(b)
    T = cluster_matrix({((1,), (3,)): 1.0}, space).matrix
    out = T @ space.unit()
    target = space.index[0b1001]
    assert out[target] == 1.0 and np.count_nonzero(out) == 1
    T = cluster_matrix({((0,), (2,)): 1.0}, space).matrix
    # a+_2 a_0 |0b0011> = -|0b0110>
    assert (T @ space.unit())[space.index[0b0110]] == -1.0


def test_cluster_nilpotent_and_pure_excitation(h4):
    space = enumerate_space(h4.basis)
    rng = np.random.default_rng(1)
    from ccdownfold.ccsolver import excitation_signatures
    t = {s: rng.normal() for s in excitation_signatures(h4.basis, 4)}
    T = cluster_matrix(t, space).matrix
    n_occ = h4.basis.n_occ
    assert np.abs(np.linalg.matrix_power(T, n_occ + 1)).max() == 0.0
    assert np.abs(np.linalg.matrix_power(T, n_occ)).max() > 0.0
    ref = space.reference_index
    assert T[ref, ref] == 0.0
    assert np.allclose(np.triu(T[np.argsort(space.ranks())][:, np.argsort(space.ranks())]), 0)


def test_exp_nilpotent_matches_expm(h4, h4_ccsd):
    space = enumerate_space(h4.basis)
    T = cluster_matrix(h4_ccsd.t, space).matrix
    np.testing.assert_allclose(exp_nilpotent_apply(T, space.unit()),
                               scipy.linalg.expm(T) @ space.unit(), atol=1e-14)


def test_fci_ground_trivial():
    space = DeterminantSpace(2, 2, 0b11, (0b11,))
    e, v = fci_ground(DenseOperator(space, np.array([[-0.75]])))
    assert e == -0.75 and v.tolist() == [1.0]


def test_fci_ground_rejects_nonsymmetric():
    space = enumerate_space(SpinOrbitalBasis(2, 2))
    with pytest.raises(ValueError, match="eig_nonhermitian"):
        fci_ground(DenseOperator(space, np.triu(np.ones((4, 4)))))


def test_fci_variational(h2):
    fock = build_fock(h2)
    e, v = fci_ground(build_matrix(h2, enumerate_space(h2.basis)))
    assert e < fock.reference_energy
    assert v[np.argmax(np.abs(v))] > 0


def test_fci_independent_eigensolver(reference):
    h = hamiltonian("h4_sto3g_chain1.8")
    space = enumerate_space(h.basis)
    M = build_matrix(h, space).matrix
    e, _ = fci_ground(DenseOperator(space, M))
    perm = np.random.default_rng(3).permutation(len(space))
    e2 = scipy.linalg.eigh(M[np.ix_(perm, perm)], eigvals_only=True, driver="ev")[0]
    assert abs(e - e2) < 1e-12
    assert e == pytest.approx(reference["h4_sto3g_chain1.8"]["fci"], abs=1e-9)


@pytest.mark.parametrize("name", ["h4_sto3g_rect2.0x2.5", "h4_sto3g_rect2.0x3.5", "lih_sto3g_r3.015",
                                  "h4_631g_rect2.0x3.0"])
def test_fci_matches_reference(name, reference):
    h = hamiltonian(name)
    e, _ = fci_ground(build_matrix(h, enumerate_space(h.basis)))
    assert e == pytest.approx(reference[name]["fci"], abs=1e-9)


def test_eig_nonhermitian_hermitian_case(h2):
    op = build_matrix(h2, enumerate_space(h2.basis))
    assert eig_nonhermitian(op)[0] == pytest.approx(fci_ground(op)[0], abs=1e-12)


def test_eig_nonhermitian_triangular():
    space = enumerate_space(SpinOrbitalBasis(1, 2))
    space2 = DeterminantSpace(4, 2, 0b0011, (0b0011, 0b1100))
    a, b, d = -1.0, 0.4, 0.7
    e, vec = eig_nonhermitian(DenseOperator(space2, np.array([[a, b], [0.0, d]])))
    assert e == a and vec[0] == pytest.approx(1.0)
    # reference second: [[d, 0], [b, a]] picks a as well
    e, _ = eig_nonhermitian(DenseOperator(space2, np.array([[d, 0.0], [b, a]])), reference=1)
    assert e == a
    assert len(space) == 1


def test_eig_nonhermitian_all_complex():
    space = DeterminantSpace(4, 2, 0b0011, (0b0011, 0b1100))
    with pytest.raises(EigenSelectionError) as info:
        eig_nonhermitian(DenseOperator(space, np.array([[0.0, 1.0], [-1.0, 0.0]])))
    assert len(info.value.spectrum) == 2


def test_commutator_identities(h4, h4_ccsd, h4_fock):
    space = enumerate_space(h4.basis)
    H = build_matrix(h4, space)
    T = cluster_matrix(h4_ccsd.t, space)
    S = DenseOperator(space, T.matrix - T.matrix.T)
    assert np.abs(commutator(H, H).matrix).max() == 0.0
    assert np.abs(commutator(H, identity(space)).matrix).max() < 1e-14
    np.testing.assert_allclose(commutator(S, H).matrix, -commutator(H, S).matrix, atol=1e-14)
    np.testing.assert_allclose(nested_commutator(H.matrix, S.matrix, 2),
                               commutator(commutator(H, S), S).matrix, atol=1e-13)
    other = enumerate_space(h4.basis, max_rank=1)
    with pytest.raises(SpaceError):
        commutator(H, identity(other))


def test_similarity_transform_modes(h2):
    space = enumerate_space(h2.basis)
    H = build_matrix(h2, space)
    zero = DenseOperator(space, np.zeros((4, 4)))
    np.testing.assert_array_equal(similarity_transform(H, zero).matrix, H.matrix)
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 4)) * 0.05
    G = DenseOperator(space, A - A.T)
    exact = similarity_transform(H, G, "exact")
    assert exact.asymmetry() < 1e-11
    bch = similarity_transform(H, G, "bch", order=12)
    assert np.abs(bch.matrix - exact.matrix).max() < 1e-10
    np.testing.assert_allclose(np.linalg.eigvalsh(exact.matrix), np.linalg.eigvalsh(H.matrix),
                               atol=1e-12)
    with pytest.raises(ValueError):
        similarity_transform(H, G, "bch")


def test_similarity_preserves_spectrum_non_hermitian(h4, h4_ccsd):
    space = enumerate_space(h4.basis)
    H = build_matrix(h4, space)
    T = cluster_matrix(h4_ccsd.t, space)
    Hbar = similarity_transform(H, T, "exact")
    ev = np.sort(np.linalg.eigvals(Hbar.matrix).real)
    np.testing.assert_allclose(ev, np.linalg.eigvalsh(H.matrix), atol=1e-10)


def test_extract_tensors_bare_hamiltonian(h4):
    act = ActiveSpace((0, 1), (2, 3))
    cas = enumerate_space(h4.basis, active=act)
    op = build_matrix(h4, cas)
    form = extract_tensors(op, act)
    assert form.residual_norm < 1e-10
    np.testing.assert_allclose(rebuild_operator(form, cas).matrix, op.matrix, atol=1e-10)
    gauge = extract_tensors(op, act, prior=reference_tensor_form(h4, act.spinorbs))
    fock = build_fock(h4)
    np.testing.assert_allclose(gauge.one_body, fock.f, atol=1e-10)
    np.testing.assert_allclose(gauge.two_body, h4.v, atol=1e-10)
    assert gauge.scalar == pytest.approx(fock.reference_energy, abs=1e-12)


def test_extract_tensors_scalar_identity(h4):
    act = ActiveSpace((1,), (2,))
    cas = enumerate_space(h4.basis, active=act)
    form = extract_tensors(3.5 * identity(cas), act)
    assert form.scalar == 3.5
    assert np.abs(form.one_body).max() < 1e-12 and np.abs(form.two_body).max() < 1e-12
    assert form.residual_norm < 1e-12


def test_extract_tensors_flags_missing_doubles(h4):
    space = enumerate_space(h4.basis, max_rank=1)
    form = extract_tensors(build_matrix(h4, space))
    assert any("no-doubles" in f for f in form.flags)
    assert form.two_body.size == 0


def test_operator_save_load(tmp_path, h4):
    act = ActiveSpace((0, 1), (2,))
    op = build_matrix(h4, enumerate_space(h4.basis, active=act))
    save_operator(op, tmp_path / "op", {"note": "test"})
    back = load_operator(tmp_path / "op")
    assert back.space == op.space
    assert np.abs(back.matrix - op.matrix).max() <= 1e-14
    assert back.provenance["note"] == "test"


def test_dense_operator_shape_checked():
    space = enumerate_space(SpinOrbitalBasis(2, 2))
    with pytest.raises(SpaceError):
        DenseOperator(space, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        DenseOperator(space, np.full((4, 4), np.nan))


def test_cluster_operator_leaving_truncated_space(h4):
    from ccdownfold.fockspace import LeavesSpaceError
    space = enumerate_space(h4.basis, max_rank=1)
    t = ClusterOperator(h4.basis, {((2,), (4,)): 0.1})
    with pytest.raises(LeavesSpaceError):
        cluster_matrix(t, space)
    M = cluster_matrix(t, space, project=True).matrix
    col = M[:, space.reference_index]
    assert np.count_nonzero(col) == 1 and abs(col).max() == 0.1
