"""Command-line driver: ``ccdownfold run | compare | fcidump-check``.

A run reads a YAML (or JSON) config, executes one pipeline fully in memory
and only then writes the report and artifacts, so input errors never leave
partial output behind.  Exit status: 0 success, 1 input error, 2 a solver
did not converge (report still written).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import re
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import __version__
from .ccsolver import (AmplitudeMask, DenominatorError, context, dump_amplitudes, residual_vector,
                       solve_cc)
from .ducc import bare_cas, build_sigma_ext, ducc_c1, ducc_c2, ducc_energy
from .flow import FlowSpec, FlowSpecError, flow_report, run_flow, union_mask
from .fockspace import (ActiveSpace, DimensionCapError, SpaceError, eig_nonhermitian, enumerate_space,
                        extract_tensors, fci_ground, reference_tensor_form, save_operator)
from .integrals import (FCIDUMPError, IntegralSet, build_fock, emit_fcidump, load_fcidump,
                        packaged_fcidump, packaged_systems, parse_fcidump, to_spinorbital)
from .interactionfit import (ChiTensors, InteractionModel, OrbitalGrid, UnsupportedFamilyError,
                             chi_from_tensor_form, eval_g, eval_u, fit_interaction, get_family,
                             load_grid, soft_coulomb_chain)
from .multicomp import (CompositeMask, composite_fci, downfold_B, ducc_downfold_B, hubbard_pair,
                        solve_cc_composite)
from .ses import emit_effective_fcidump, is_ses, partition, ses_energy

log = logging.getLogger("ccdownfold")

SCHEMA = "ccdownfold-report/1"
METHODS = ("ccsd", "ses", "ducc-c1", "ducc-c2", "flow", "multicomp", "fit")
ORACLE_AUTO_LIMIT = 5000
EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

# report energy keys shown by ``compare``, in table order
TABLE_ROWS = [("RHF", "rhf"), ("CCSD", "ccsd"), ("bare", "bare_cas"), ("C1", "ducc_c1"),
              ("C2", "ducc_c2"), ("FCI", "fci")]


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    method: str
    system: dict
    base_dir: Path
    output: Path
    active: object = None
    flow: dict = field(default_factory=dict)
    composite: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    oracle: object = "auto"
    seed: int = 0
    text: str = ""

    @property
    def cc_tol(self) -> float:
        return float(self.tolerances.get("cc", 1e-9))

    @property
    def cc_max_iter(self) -> int:
        return int(self.tolerances.get("cc_max_iter", 200))


def load_config(path: Path, output: Path | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file {path} not found")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: cannot parse config: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be a mapping")
    known = {"method", "system", "active", "flow", "composite", "fit", "tolerances",
             "output", "oracle", "seed"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InputError(f"{path}: unknown config keys {unknown}")
    method = data.get("method")
    if method not in METHODS:
        raise InputError(f"{path}: method must be one of {list(METHODS)}, got {method!r}")
    system = data.get("system") or {}
    if method != "multicomp" and not system:
        raise InputError(f"{path}: method {method} needs a 'system' section")
    if method in ("ses", "ducc-c1", "ducc-c2") and data.get("active") is None:
        raise InputError(f"{path}: method {method} needs an 'active' space")
    if method == "flow" and not (data.get("flow") or {}).get("active_spaces"):
        raise InputError(f"{path}: method flow needs flow.active_spaces")
    oracle = data.get("oracle", "auto")
    if oracle not in ("auto", True, False):
        raise InputError(f"{path}: oracle must be auto, true or false")
    base = path.parent
    out = output if output is not None else base / data.get("output", f"{path.stem}_out")
    return RunConfig(method, system, base, Path(out), data.get("active"), data.get("flow") or {},
                     data.get("composite") or {}, data.get("fit") or {},
                     data.get("tolerances") or {}, oracle, int(data.get("seed", 0)), text)


_SELECTOR = re.compile(r"(occ|virt)\s*:\s*(.+?)\s*(?=(?:occ|virt)\s*:|$)")


def _select(kind: str, sel: str, pool: tuple[int, ...]) -> tuple[int, ...]:
    sel = sel.strip().rstrip(",")
    if sel == "all":
        return pool
    m = re.fullmatch(r"(lowest|highest)\s+(\d+)", sel)
    if m:
        k = int(m.group(2))
        if not 0 < k <= len(pool):
            raise InputError(f"{kind}: cannot take {k} of {len(pool)} orbitals")
        return pool[:k] if m.group(1) == "lowest" else pool[len(pool) - k:]
    try:
        idx = tuple(int(tok) for tok in re.split(r"[,\s]+", sel) if tok)
    except ValueError:
        raise InputError(f"{kind}: cannot read orbital selection {sel!r}") from None
    bad = [i for i in idx if i not in pool]
    if bad or not idx:
        raise InputError(f"{kind}: orbitals {bad or sel} are not among {list(pool)}")
    return idx


def parse_active(spec, basis) -> ActiveSpace:
    """``"occ:all virt:lowest 2"``, ``"occ:0,1 virt:2"`` or ``{occupied: [...], virtual: [...]}``.

    Orbital indices are 0-based spatial indices.  ``lowest``/``highest`` pick
    by orbital index within the occupied or virtual set.
    """
    if isinstance(spec, dict):
        occ = spec.get("occupied", "all")
        virt = spec.get("virtual", "all")
        occ = occ if isinstance(occ, str) else ",".join(map(str, occ))
        virt = virt if isinstance(virt, str) else ",".join(map(str, virt))
        spec = f"occ:{occ} virt:{virt}"
    if not isinstance(spec, str):
        raise InputError(f"cannot read active space {spec!r}")
    parts = dict((k, v) for k, v in _SELECTOR.findall(spec.strip()))
    if set(parts) != {"occ", "virt"}:
        raise InputError(f"active space {spec!r} needs both occ: and virt: selections")
    occ = _select("occ", parts["occ"], basis.occupied_spatial)
    virt = _select("virt", parts["virt"], basis.virtual_spatial)
    return ActiveSpace(occ, virt)


def _sha(text: str | bytes) -> str:
    data = text.encode() if isinstance(text, str) else text
    return hashlib.sha256(data).hexdigest()[:16]


@dataclass
class System:
    name: str
    ints: IntegralSet
    hash: str
    source: str
    grid: OrbitalGrid | None = None

    def describe(self) -> dict:
        return {"name": self.name, "hash": self.hash, "source": self.source,
                "n_spatial": self.ints.n_spatial, "n_elec": self.ints.n_elec}


def load_system(cfg: RunConfig) -> System:
    sysc = cfg.system
    try:
        if "fcidump" in sysc:
            path = (cfg.base_dir / sysc["fcidump"]).resolve()
            if not path.is_file():
                raise InputError(f"FCIDUMP {path} not found")
            text = path.read_text()
            ints = parse_fcidump(text)
            return System(sysc.get("name", path.stem), ints, _sha(text), str(path))
        if "builtin" in sysc:
            name = sysc["builtin"]
            try:
                text = packaged_fcidump(name).read_text()
            except FileNotFoundError as exc:
                raise InputError(str(exc)) from None
            return System(sysc.get("name", name), parse_fcidump(text), _sha(text), f"builtin:{name}")
        if "chain" in sysc:
            params = dict(sysc["chain"] or {})
            ints, grid = soft_coulomb_chain(**params)
            tag = json.dumps(params, sort_keys=True)
            return System(sysc.get("name", "soft_coulomb_chain"), ints, _sha("chain" + tag),
                          f"chain:{tag}", grid)
    except FCIDUMPError as exc:
        raise InputError(f"bad FCIDUMP: {exc}") from None
    except TypeError as exc:
        raise InputError(f"bad system parameters: {exc}") from None
    raise InputError("system needs one of: fcidump, builtin, chain")


# ---------------------------------------------------------------------------
# report helpers
# ---------------------------------------------------------------------------

def _energy(value: float, operation: str) -> dict:
    return {"value": round(float(value), 10), "operation": operation}


def _clean(obj):
    """JSON-safe copy; floats pass through 15 significant digits."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return float(f"{x:.15g}")
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


@dataclass
class Outcome:
    energies: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    artifacts: dict[str, Callable[[Path], None]] = field(default_factory=dict)
    converged: bool = True
    active: dict | None = None
    system: dict | None = None


class _ListHandler(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(f"{record.name}: {record.getMessage()}")


def _oracle_fci(h, cfg: RunConfig, forced: bool):
    if cfg.oracle is False and not forced:
        return None
    space = enumerate_space(h.basis)
    if len(space) > ORACLE_AUTO_LIMIT and not (forced or cfg.oracle is True):
        log.warning("FCI oracle skipped: %d determinants (use --oracle to force)", len(space))
        return None
    return fci_ground(context(h).hop)[0]


def _write_amplitudes(t):
    return lambda p: p.write_text(dump_amplitudes(t))


def _write_operator(op, prov=None):
    return lambda p: save_operator(op, p.with_suffix(""), prov)


def _write_text(text: str):
    return lambda p: p.write_text(text)


def _write_json(data):
    return lambda p: p.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def _tensor_dict(form) -> dict:
    return {"scalar": form.scalar, "orbitals": list(form.orbitals),
            "one_body": form.one_body, "two_body": form.two_body,
            "residual_norm": form.residual_norm, "flags": list(form.flags),
            "convention": "normal ordered w.r.t. the reference; two_body antisymmetric, 1/4 prefactor"}


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def _ccsd_core(cfg: RunConfig, h, forced_oracle: bool, out: Outcome):
    fock = build_fock(h)
    cc = solve_cc(h, AmplitudeMask.ccsd(h.basis), tol=cfg.cc_tol, max_iter=cfg.cc_max_iter)
    out.energies["rhf"] = _energy(fock.reference_energy, "<Phi|H|Phi>")
    out.energies["ccsd"] = _energy(cc.energy, "solve_cc(CCSD) projective energy")
    out.energies["ccsd_correlation"] = _energy(cc.correlation_energy, "E(CCSD) - E(RHF)")
    out.residuals["ccsd_max"] = cc.residual_norm
    out.results["ccsd"] = {"iterations": cc.iterations, "converged": cc.converged,
                           "amplitudes": len(cc.t)}
    out.converged &= cc.converged
    out.artifacts["amplitudes.txt"] = _write_amplitudes(cc.t)
    e_fci = _oracle_fci(h, cfg, forced_oracle)
    if e_fci is not None:
        out.energies["fci"] = _energy(e_fci, "fci_ground(build_matrix(H, full space))")
    return fock, cc


def _active_desc(act: ActiveSpace) -> dict:
    return {"occupied": list(act.occupied), "virtual": list(act.virtual),
            "x_R": act.x_R, "y_S": act.y_S}


def _active(cfg, h) -> ActiveSpace:
    try:
        act = parse_active(cfg.active, h.basis)
        act.validate(h.basis)
    except ValueError as exc:
        raise InputError(f"active space: {exc}") from None
    return act


def run_ccsd(cfg, system, opts, out):
    _ccsd_core(cfg, to_spinorbital(system.ints), opts.oracle, out)


def run_ses(cfg, system, opts, out):
    h = to_spinorbital(system.ints)
    act = _active(cfg, h)
    check = is_ses(act, h.basis, 2)
    if not check and not opts.force:
        raise InputError(f"active space is not an SES: {check.explanation} (use --force)")
    fock, cc = _ccsd_core(cfg, h, opts.oracle, out)
    res = ses_energy(h, cc.t, act, force=opts.force)
    out.active = _active_desc(act)
    out.energies["ses"] = _energy(res.energy, "eig_nonhermitian(H_eff(SES)) max reference overlap")
    out.results["ses"] = {"is_ses": bool(check), "guaranteed": res.guaranteed,
                          "cosine": res.cosine, "cas_dimension": res.heff.dimension,
                          "ses_minus_ccsd": res.energy - cc.energy}
    out.artifacts["heff_ses.bin"] = _write_operator(res.heff.matrix)
    form = extract_tensors(res.heff.matrix, act, prior=reference_tensor_form(h, act.spinorbs))
    out.residuals["tensor_residual_norm"] = form.residual_norm
    out.artifacts["heff_ses.fcidump"] = _write_text(
        emit_effective_fcidump(form, act.occupied_spinorbs, hermitian=False))


def run_ducc(cfg, system, opts, out):
    h = to_spinorbital(system.ints)
    act = _active(cfg, h)
    fock, cc = _ccsd_core(cfg, h, opts.oracle, out)
    _, t_ext = partition(cc.t, act)
    sigma = build_sigma_ext(t_ext)
    out.active = _active_desc(act)
    ops = {"bare_cas": bare_cas(h, act), "ducc_c1": ducc_c1(h, fock, sigma, act),
           "ducc_c2": ducc_c2(h, fock, sigma, act)}
    labels = {"bare_cas": "eigh(P H P) on the CAS", "ducc_c1": "eigh(C1 DUCC H_eff)",
              "ducc_c2": "eigh(C2 DUCC H_eff)"}
    for key, heff in ops.items():
        e, _ = ducc_energy(heff)
        out.energies[key] = _energy(e, labels[key])
        out.artifacts[f"heff_{key}.bin"] = _write_operator(heff.matrix)
    out.results["ducc"] = {
        "selected": cfg.method.replace("-", "_"),
        "cas_dimension": ops["bare_cas"].dimension,
        "asymmetry_before_symmetrization": {k: ops[k].provenance.get("asymmetry", 0.0)
                                            for k in ("ducc_c1", "ducc_c2")}}
    sel = ops[cfg.method.replace("-", "_")]
    form = extract_tensors(sel.matrix, act, prior=reference_tensor_form(h, act.spinorbs))
    out.residuals["tensor_residual_norm"] = form.residual_norm
    out.artifacts["tensors.json"] = _write_json(_tensor_dict(form))
    out.artifacts[f"heff_{cfg.method.replace('-', '_')}.fcidump"] = _write_text(
        emit_effective_fcidump(form, act.occupied_spinorbs, hermitian=True))


def run_flow_method(cfg, system, opts, out):
    h = to_spinorbital(system.ints)
    try:
        actives = [parse_active(a, h.basis) for a in cfg.flow["active_spaces"]]
        spec = FlowSpec(actives, tol=float(cfg.flow.get("tol", 1e-10)),
                        max_sweeps=int(cfg.flow.get("max_sweeps", 200)),
                        relaxation=float(cfg.flow.get("relaxation", 1.0)))
        for a in actives:
            a.validate(h.basis)
            chk = is_ses(a, h.basis, spec.rank)
            if not chk:
                raise InputError(f"flow active space {a} is not an SES: {chk.explanation}")
    except (ValueError, FlowSpecError) as exc:
        raise InputError(f"flow: {exc}") from None
    _ccsd_core(cfg, h, opts.oracle, out)
    energy, state = run_flow(h, spec)
    rep = flow_report(state)
    out.energies["flow"] = _energy(energy, "cc_energy(pooled flow amplitudes)")
    mask = union_mask(h, spec)
    res = residual_vector(h, state.pool, mask)
    out.residuals["flow_union_mask_max"] = max(abs(v) for v in res.values())
    if cfg.oracle is not False:
        ref = solve_cc(h, mask, tol=1e-12, max_iter=500)
        out.energies["union_mask_cc"] = _energy(ref.energy, "solve_cc(union of internal masks)")
    out.results["flow"] = rep
    out.results["flow"]["active_spaces"] = [_active_desc(a) for a in actives]
    out.converged &= state.converged
    out.artifacts["flow_amplitudes.txt"] = _write_amplitudes(state.pool)

    def figure(p):
        from .plotting import flow_figure
        flow_figure(rep["trajectory"], p)
    out.artifacts["flow.png"] = figure


def run_multicomp(cfg, system, opts, out):
    params = dict(cfg.composite)
    gen = params.pop("generator", "hubbard")
    modes = params.pop("ducc_modes", ["exact", "c1", "c2"])
    joint = params.pop("joint", True)
    if gen != "hubbard":
        raise InputError(f"unknown composite generator {gen!r}")
    try:
        ch = hubbard_pair(**params)
    except (TypeError, ValueError) as exc:
        raise InputError(f"composite model: {exc}") from None
    tag = json.dumps({"generator": gen, **params}, sort_keys=True)
    out.system = {"name": f"composite:{gen}", "hash": _sha(tag), "source": tag,
                  "n_spatial": [ch.h_A.basis.n_spatial, ch.h_B.basis.n_spatial],
                  "n_elec": [ch.h_A.basis.n_elec, ch.h_B.basis.n_elec]}
    e_fci = composite_fci(ch)
    res = solve_cc_composite(ch, CompositeMask.full(ch.basis, joint=bool(joint)), tol=cfg.cc_tol,
                             max_iter=cfg.cc_max_iter)
    out.converged &= res.converged
    cl = res.cluster
    heff = downfold_B(ch, cl.t_B, cl.s_AB)
    e_a, _ = eig_nonhermitian(heff.matrix)
    out.energies["composite_fci"] = _energy(e_fci, "eigvalsh(H_AB) on the fixed-number composite space")
    out.energies["composite_cc"] = _energy(res.energy, "solve_cc_composite projective energy")
    out.energies["heff_A"] = _energy(e_a, "eig_nonhermitian(downfold_B)")
    for mode in modes:
        d = ducc_downfold_B(ch, cl.t_B, cl.s_AB, mode)
        e, _ = ducc_energy(d)
        out.energies[f"ducc_A_{mode}"] = _energy(e, f"eigh(ducc_downfold_B mode={mode})")
    out.residuals["composite_cc_max"] = res.residual_norm
    out.results["multicomp"] = {"converged": res.converged, "iterations": res.iterations,
                                "joint_amplitudes": len(cl.s_AB),
                                "max_joint_amplitude": max((abs(v) for v in cl.s_AB.values()), default=0.0)}
    out.artifacts["heff_A.bin"] = _write_operator(heff.matrix)


def _fit_grid(cfg, system) -> OrbitalGrid | None:
    spec = cfg.fit.get("grid")
    if spec is None:
        return system.grid if system is not None else None
    if isinstance(spec, str):
        path = (cfg.base_dir / spec).resolve()
        if not path.is_file():
            raise InputError(f"grid file {path} not found")
        return load_grid(path)
    if isinstance(spec, dict) and "harmonic" in spec:
        return OrbitalGrid.harmonic(**spec["harmonic"])
    raise InputError("fit.grid must be a file path or {harmonic: {...}}")


def run_fit(cfg, system, opts, out):
    fc = cfg.fit
    source = fc.get("source", "c2")
    families = fc.get("families", {"u": "poly_r2", "g": "soft_coulomb"})
    init = fc.get("init", {})
    budget = int(fc.get("budget", 10_000))
    try:
        for kind, fam in families.items():
            if get_family(fam).kind != kind:
                raise InputError(f"family {fam} is not a {kind} family")
            if kind not in init:
                raise InputError(f"fit.init.{kind} missing")
        grid = _fit_grid(cfg, system)
        if grid is None:
            raise InputError("fit needs a grid (fit.grid or a chain system)")
        if source == "synthetic":
            truth = fc.get("synthetic", {})
            n = grid.n_orb
            one = eval_u(InteractionModel(families["u"], truth["u"]), grid) if "u" in families else np.zeros((n, n))
            two = eval_g(InteractionModel(families["g"], truth["g"]), grid) if "g" in families else np.zeros((n,) * 4)
            chi = ChiTensors(one, two, tuple(range(n)))
        elif source in ("bare", "c1", "c2"):
            if system is None:
                raise InputError("fit from a downfolded Hamiltonian needs a system")
            h = to_spinorbital(system.ints)
            cfg.active = cfg.active or "occ:all virt:lowest 2"
            act = _active(cfg, h)
            out.active = _active_desc(act)
            fock = build_fock(h)
            if source == "bare":
                heff = bare_cas(h, act)
            else:
                cc = solve_cc(h, AmplitudeMask.ccsd(h.basis), tol=cfg.cc_tol, max_iter=cfg.cc_max_iter)
                out.converged &= cc.converged
                out.energies["ccsd"] = _energy(cc.energy, "solve_cc(CCSD) projective energy")
                sigma = build_sigma_ext(partition(cc.t, act)[1])
                heff = (ducc_c1 if source == "c1" else ducc_c2)(h, fock, sigma, act)
            form = extract_tensors(heff.matrix, act, prior=reference_tensor_form(h, act.spinorbs))
            chi, asym = chi_from_tensor_form(form, h.basis.occupied)
            out.residuals["tensor_residual_norm"] = form.residual_norm
            out.residuals["chi_symmetrization"] = asym
            grid = grid.subset(chi.orbitals)
        else:
            raise InputError(f"unknown fit source {source!r}")
    except (KeyError, TypeError, UnsupportedFamilyError) as exc:
        raise InputError(f"fit: {exc}") from None
    fits = {}
    for kind in sorted(families):
        res = fit_interaction(chi, grid, families[kind], init[kind], budget=budget, seed=cfg.seed)
        fits[kind] = res.report()
        out.converged &= res.converged

        def heat(p, r=res.residuals, k=kind):
            from .plotting import residual_heatmap
            residual_heatmap(r, p, f"{k} residuals")
        out.artifacts[f"fit_{kind}_residuals.png"] = heat
    out.results["fit"] = {"source": source, "fits": fits}


PIPELINES = {"ccsd": run_ccsd, "ses": run_ses, "ducc-c1": run_ducc, "ducc-c2": run_ducc,
             "flow": run_flow_method, "multicomp": run_multicomp, "fit": run_fit}


@dataclass
class Options:
    force: bool = False
    oracle: bool = False


def cmd_run(config: Path, output: Path | None = None, force: bool = False,
            oracle: bool = False) -> int:
    handler = _ListHandler()
    log.addHandler(handler)
    timings = {}
    t_start = time.perf_counter()
    try:
        cfg = load_config(config, output)
        opts = Options(force, oracle)
        system = None
        if cfg.method != "multicomp":
            t0 = time.perf_counter()
            system = load_system(cfg)
            timings["load"] = time.perf_counter() - t0
        out = Outcome()
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            PIPELINES[cfg.method](cfg, system, opts, out)
        timings["pipeline"] = time.perf_counter() - t0
        for w in caught:
            handler.messages.append(f"{w.category.__name__}: {w.message}")
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, SpaceError, DimensionCapError, DenominatorError, FCIDUMPError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        log.removeHandler(handler)
    timings["total"] = time.perf_counter() - t_start
    sys_desc = out.system if out.system is not None else system.describe()
    report = {
        "schema": SCHEMA,
        "version": __version__,
        "method": cfg.method,
        "system": sys_desc,
        "inputs": {"config_sha256": _sha(cfg.text), "system_sha256": sys_desc["hash"]},
        "active_space": out.active,
        "energies": out.energies,
        "residuals": out.residuals,
        "results": out.results,
        "converged": bool(out.converged),
        "warnings": sorted(set(handler.messages)),
        "errors": [] if out.converged else ["a solver did not converge; see results"],
        "artifacts": sorted(out.artifacts),
    }
    cfg.output.mkdir(parents=True, exist_ok=True)
    for name, writer in sorted(out.artifacts.items()):
        writer(cfg.output / name)
    body = _clean(report)
    body["timings"] = {k: round(v, 4) for k, v in timings.items()}
    (cfg.output / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    _print_summary(report, cfg.output)
    return EXIT_OK if out.converged else EXIT_NOT_CONVERGED


def _print_summary(report: dict, outdir: Path) -> None:
    print(f"{report['method']} on {report['system']['name']}  ->  {outdir / 'report.json'}")
    for key, e in report["energies"].items():
        print(f"  {key:<18s} {e['value']: .10f}")
    if not report["converged"]:
        print("  NOT CONVERGED")


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _read_report(path: Path) -> dict:
    try:
        rep = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"report {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"report {path} is not valid JSON: {exc}") from None
    if rep.get("schema") != SCHEMA:
        raise InputError(f"report {path} has schema {rep.get('schema')!r}, expected {SCHEMA}")
    return rep


def build_comparison(reports: list[dict], reference: str = "FCI") -> dict:
    if len(reports) < 2:
        raise InputError("compare needs at least two reports")
    shapes = {}
    for rep in reports:
        s = rep["system"]
        key = (json.dumps([s.get("n_spatial"), s.get("n_elec")]), json.dumps(rep.get("active_space")))
        shapes.setdefault(key, []).append(f"{s['name']} ({s['hash']})")
    if len(shapes) > 1:
        listing = "; ".join(f"[{', '.join(v)}] orbitals/electrons={k[0]} active={k[1]}"
                            for k, v in shapes.items())
        raise InputError(f"reports describe mismatched systems: {listing}")
    ref_key = dict(TABLE_ROWS).get(reference, reference)
    columns = [rep["system"]["name"] for rep in reports]
    energies, errors = {}, {}
    for label, key in TABLE_ROWS:
        vals = [rep["energies"].get(key, {}).get("value") for rep in reports]
        if all(v is None for v in vals):
            continue
        energies[label] = vals
    for rep in reports:
        if ref_key not in rep["energies"]:
            raise InputError(f"report for {rep['system']['name']} lacks the reference energy {reference}")
    refs = [rep["energies"][ref_key]["value"] for rep in reports]
    for label, vals in energies.items():
        if label == reference:
            continue
        errors[label] = [None if v is None else round(v - r, 10) for v, r in zip(vals, refs)]
    return {"schema": SCHEMA.replace("report", "comparison"), "reference": reference,
            "columns": columns, "hashes": [rep["system"]["hash"] for rep in reports],
            "energies": energies, "errors": errors}


def format_table(cmp: dict) -> str:
    cols = cmp["columns"]
    width = max(14, *(len(c) + 2 for c in cols))
    head = f"{'method':<8s}" + "".join(f"{c:>{width}s}" for c in cols)
    lines = ["Energies (Hartree)", head, "-" * len(head)]
    for label, vals in cmp["energies"].items():
        lines.append(f"{label:<8s}" + "".join(
            f"{'-':>{width}s}" if v is None else f"{v:>{width}.6f}" for v in vals))
    lines += ["", f"Errors relative to {cmp['reference']} (mH)", head, "-" * len(head)]
    for label, vals in cmp["errors"].items():
        lines.append(f"{label:<8s}" + "".join(
            f"{'-':>{width}s}" if v is None else f"{v * 1e3:>{width}.3f}" for v in vals))
    return "\n".join(lines) + "\n"


def cmd_compare(paths: list[Path], output: Path, reference: str = "FCI") -> int:
    try:
        reports = [_read_report(p) for p in paths]
        cmp = build_comparison(reports, reference)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    output.mkdir(parents=True, exist_ok=True)
    text = format_table(cmp)
    (output / "comparison.txt").write_text(text)
    (output / "comparison.json").write_text(json.dumps(_clean(cmp), indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["quantity", "method", *cmp["columns"]])
    for label, vals in cmp["energies"].items():
        writer.writerow(["energy_hartree", label, *("" if v is None else f"{v:.10f}" for v in vals)])
    for label, vals in cmp["errors"].items():
        writer.writerow(["error_hartree", label, *("" if v is None else f"{v:.10f}" for v in vals)])
    (output / "comparison.csv").write_text(buf.getvalue())
    from .plotting import error_figure
    error_figure(cmp["columns"], cmp["errors"], output / "comparison.png", cmp["reference"])
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fcidump-check
# ---------------------------------------------------------------------------

def cmd_fcidump_check(path: Path) -> int:
    try:
        ints = load_fcidump(path)
    except FileNotFoundError:
        print(f"error: {path} not found", file=sys.stderr)
        return EXIT_INPUT
    except (FCIDUMPError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    problems = []
    try:
        ints.check_symmetry()
    except ValueError as exc:
        problems.append(str(exc))
    h = to_spinorbital(ints)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fock = build_fock(h)
    again = parse_fcidump(emit_fcidump(ints))
    drift = max(float(np.abs(again.h_spatial - ints.h_spatial).max()),
                float(np.abs(again.eri_spatial - ints.eri_spatial).max()))
    print(f"file            {path}")
    print(f"orbitals        {ints.n_spatial} spatial, {2 * ints.n_spatial} spin")
    print(f"electrons       {ints.n_elec} (MS2={ints.ms2})")
    print(f"core energy     {ints.e_core:.10f}")
    print(f"E(reference)    {fock.reference_energy:.10f}")
    print(f"round trip      max change {drift:.1e}")
    for w in caught:
        print(f"warning         {w.message}")
    for p in problems:
        print(f"problem         {p}")
    return EXIT_INPUT if problems or drift > 1e-12 else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccdownfold", description="Coupled-cluster downfolding toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute the pipeline declared in a config file")
    run.add_argument("config", type=Path)
    run.add_argument("-o", "--output", type=Path, default=None, help="output directory")
    run.add_argument("--force", action="store_true", help="allow non-SES active spaces")
    run.add_argument("--oracle", action="store_true",
                     help="attach the FCI energy even for large (capped) spaces")
    cmp = sub.add_parser("compare", help="tabulate energies from several reports")
    cmp.add_argument("reports", type=Path, nargs="+")
    cmp.add_argument("-o", "--output", type=Path, default=Path("comparison"))
    cmp.add_argument("--reference", default="FCI", help="reference row (default FCI)")
    chk = sub.add_parser("fcidump-check", help="parse and sanity-check an FCIDUMP file")
    chk.add_argument("file", type=Path)
    sub.add_parser("systems", help="list the packaged FCIDUMP systems")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.output, args.force, args.oracle)
    if args.command == "compare":
        return cmd_compare(args.reports, args.output, args.reference)
    if args.command == "fcidump-check":
        return cmd_fcidump_check(args.file)
    for name in packaged_systems():
        print(name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
