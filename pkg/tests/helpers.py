"""Random test Hamiltonians with the usual permutational symmetry."""
import numpy as np

from ccdownfold.integrals import IntegralSet, to_spinorbital


def random_integrals(n_spatial, n_elec, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(n_spatial, n_spatial)) * scale
    h = 0.5 * (h + h.T) + np.diag(np.arange(n_spatial) * 1.5 - 2.0)
    g = rng.normal(size=(n_spatial,) * 4) * scale * 0.5
    for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)):
        g = 0.5 * (g + g.transpose(perm))
    return IntegralSet(n_spatial, n_elec, 0, float(rng.normal()), h, g)


def random_hamiltonian(n_spatial, n_elec, seed, scale=0.3):
    return to_spinorbital(random_integrals(n_spatial, n_elec, seed, scale))
