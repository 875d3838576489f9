"""Regenerate the FCIDUMP fixtures shipped in ``src/ccdownfold/data``.

Requires pyscf (development only; the package never imports it).
Geometries are in bohr.
"""
import os
import sys

from pyscf import gto, scf
from pyscf.tools import fcidump

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "ccdownfold", "data")


def h4_rect(a, b):
    return [("H", (0, 0, 0)), ("H", (a, 0, 0)), ("H", (0, b, 0)), ("H", (a, b, 0))]


def h4_chain(d):
    return [("H", (0, 0, i * d)) for i in range(4)]


SYSTEMS = {
    "h2_sto3g_r1.4011": ([("H", (0, 0, 0)), ("H", (0, 0, 1.4011))], "sto-3g"),
    "h4_sto3g_square0.8": (h4_rect(0.8, 0.8), "sto-3g"),
    "h4_sto3g_rect2.0x2.5": (h4_rect(2.0, 2.5), "sto-3g"),
    "h4_sto3g_rect2.0x3.5": (h4_rect(2.0, 3.5), "sto-3g"),
    "h4_sto3g_chain1.8": (h4_chain(1.8), "sto-3g"),
    "lih_sto3g_r3.015": ([("Li", (0, 0, 0)), ("H", (0, 0, 3.015))], "sto-3g"),
    "lih_sto3g_r4.0": ([("Li", (0, 0, 0)), ("H", (0, 0, 4.0))], "sto-3g"),
    "lih_sto3g_r5.0": ([("Li", (0, 0, 0)), ("H", (0, 0, 5.0))], "sto-3g"),
    "h4_631g_rect2.0x2.5": (h4_rect(2.0, 2.5), "6-31g"),
    "h4_631g_rect2.0x3.0": (h4_rect(2.0, 3.0), "6-31g"),
    "h4_631g_rect2.0x4.0": (h4_rect(2.0, 4.0), "6-31g"),
}


def main(names):
    os.makedirs(OUT, exist_ok=True)
    for name in names or SYSTEMS:
        atoms, basis = SYSTEMS[name]
        mol = gto.M(atom=atoms, basis=basis, unit="Bohr", verbose=0, symmetry=False)
        mf = scf.RHF(mol).run(conv_tol=1e-13)
        path = os.path.join(OUT, name + ".fcidump")
        fcidump.from_scf(mf, path, tol=1e-15, float_format="%.16e")
        print(f"{name:26s} E(RHF) = {mf.e_tot:.10f}  mo_energy = {mf.mo_energy.round(4)}")


if __name__ == "__main__":
    main(sys.argv[1:])
