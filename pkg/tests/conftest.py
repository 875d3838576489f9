import json
from pathlib import Path

import pytest

from ccdownfold.ccsolver import AmplitudeMask, solve_cc
from ccdownfold.integrals import build_fock, load_fcidump, packaged_fcidump, to_spinorbital

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def reference():
    """Independent pyscf energies for the packaged systems."""
    return json.loads((DATA / "reference_energies.json").read_text())


_HAMILTONIANS = {}
_CCSD = {}


def hamiltonian(name):
    if name not in _HAMILTONIANS:
        _HAMILTONIANS[name] = to_spinorbital(load_fcidump(packaged_fcidump(name)))
    return _HAMILTONIANS[name]


def ccsd(name):
    if name not in _CCSD:
        h = hamiltonian(name)
        _CCSD[name] = solve_cc(h, AmplitudeMask.ccsd(h.basis), tol=1e-11)
    return _CCSD[name]


@pytest.fixture(scope="session")
def h2():
    return hamiltonian("h2_sto3g_r1.4011")


@pytest.fixture(scope="session")
def h4():
    return hamiltonian("h4_sto3g_rect2.0x2.5")


@pytest.fixture(scope="session")
def h4_ccsd():
    return ccsd("h4_sto3g_rect2.0x2.5")


@pytest.fixture(scope="session")
def h4_fock(h4):
    return build_fock(h4)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(k for k in mod.RESULTS if isinstance(k, int)):
        terminalreporter.write_line(mod.RESULTS[key])
