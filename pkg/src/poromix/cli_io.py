"""Scenario configuration, the built-in studies and their CSV/VTK output.

Configurations are INI files (``configparser``) with the sections

``[scenario]``  name, out
``[mesh]``      source (``builtin`` or a mesh file), L, n, levels
``[solver]``    every :class:`SolverConfig` field, scales as ``scale_<field>``
``[material.<region>]``  every :class:`MaterialParams` field
``[interface]`` mu_S, mu_S_list
``[mms]``       u_o, p_o, ip_o, t_o, sine_regions
``[loading]``   u_top, forcing (``t_o`` is shared with ``[mms]``)
``[channel]``   H, eta, delta, gamma (comma lists), fd_points
``[bc]``        ``<tag>.<field> = <spec>``
``[pins]``      ``<name> = <field>, <component>, <X>, <Y>``
``[output]``    vtk_every

A boundary spec is ``free``, ``impermeable`` (``v_f`` only),
``dirichlet:<callback>[:x|y|xy]`` or ``traction:<callback>``.  Dirichlet
callbacks are ``zero``, ``mms`` and ``ramp`` (vertical ``u_top (t/t_o)^2``);
traction callbacks are ``zero`` and ``mms``.  ``free`` is a traction-free
boundary.
"""

from __future__ import annotations

import argparse
import configparser
from dataclasses import dataclass, field, fields, replace
import logging
import os
from pathlib import Path
import sys
import tempfile
import time

import numpy as np

from .assembly import (
    BoundaryConditions,
    Dirichlet,
    Impermeable,
    Pin,
    Problem,
    State,
    Traction,
)
from .channel import (
    ChannelError,
    ChannelProblem,
    solve_channel,
    solve_channel_fd_oracle,
    solve_pseudo_no_slip,
)
from .constitutive import InterfaceParams, MaterialParams, StateValidityError
from .diagnostics import energy_audit, jump_report
from .mesh import MeshError, gen_two_squares, read_mesh
from .mms import (
    MMSForcing,
    ManufacturedSolution,
    convergence_rates,
    error_norms,
    mms_initial_state,
    reference_materials,
)
from .solver import LinearSolveError, NewtonError, SolverConfig, integrate

__all__ = [
    "SCENARIOS",
    "ConfigError",
    "ScenarioConfig",
    "default_config",
    "parse_config",
    "serialize_config",
    "load_config",
    "build_problem",
    "run_mms_convergence",
    "run_channel",
    "run_viscosity_sweep",
    "run_simulation",
    "visualization_mesh",
    "write_vtk",
    "write_csv",
    "main",
]

log = logging.getLogger(__name__)

SCENARIOS = ("mms-convergence", "channel", "sweep", "run")
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
SOLVER_ERRORS = (NewtonError, LinearSolveError, StateValidityError)

DIRICHLET_CALLBACKS = ("zero", "mms", "ramp")
TRACTION_CALLBACKS = ("zero", "mms")
_COMPONENTS = {"x": (0,), "y": (1,), "xy": (0, 1)}
_BC_FIELDS = ("u_s", "v_f")


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


def _default_mu_list():
    return tuple(float(10.0**k) for k in range(7))


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to run one scenario.

    ``bcs`` maps ``(tag, field)`` to a boundary spec string; ``pins`` holds
    ``(field, component, X, Y)`` tuples.
    """

    scenario: str = "run"
    out: str = "out"
    mesh: str = "builtin"
    L: float = 1e-2
    n: int = 8
    levels: tuple = (8, 16, 32, 64)
    solver: SolverConfig = field(default_factory=SolverConfig)
    materials: dict = field(default_factory=reference_materials)
    interface: InterfaceParams = field(default_factory=InterfaceParams)
    mu_S_list: tuple = field(default_factory=_default_mu_list)
    u_o: float = 1e-3
    p_o: float = 2.5e3
    ip_o: float = 1e3
    t_o: float = 1.0
    sine_regions: tuple = ("B",)
    u_top: float = -1e-3
    forcing: str = "none"
    H: tuple = (1.0, 0.25)
    eta: tuple = (1.0, 2.0)
    delta: tuple = (0.05, 0.1, 0.2)
    gamma: tuple = (1.0, 10.0, 1000.0)
    fd_points: int = 20001
    bcs: dict = field(default_factory=dict)
    pins: tuple = ()
    vtk_every: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if not (self.L > 0 and np.isfinite(self.L)):
            raise ConfigError("mesh.L must be positive")
        if int(self.n) < 1:
            raise ConfigError("mesh.n must be a positive integer")
        lv = tuple(int(x) for x in self.levels)
        if not lv or any(b <= a for a, b in zip(lv, lv[1:])) or lv[0] < 1:
            raise ConfigError("mesh.levels must be a strictly increasing list of positive integers")
        object.__setattr__(self, "levels", lv)
        for name in ("mu_S_list", "H", "eta", "delta", "gamma"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if any(not (m >= 0 and np.isfinite(m)) for m in self.mu_S_list):
            raise ConfigError("interface.mu_S_list entries must be non-negative")
        if self.forcing not in ("none", "mms"):
            raise ConfigError("loading.forcing must be 'none' or 'mms'")
        if self.t_o <= 0:
            raise ConfigError("t_o must be positive")
        for (tag, fld), spec in self.bcs.items():
            _parse_bc_spec(tag, fld, spec)

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    def manufactured(self) -> ManufacturedSolution:
        return ManufacturedSolution(u_o=self.u_o, p_o=self.p_o, ip_o=self.ip_o, L=self.L,
                                    t_o=self.t_o, materials=dict(self.materials),
                                    interface=self.interface,
                                    sine_regions=tuple(self.sine_regions))

    @property
    def velocity_scale(self) -> float:
        """Characteristic velocity [m/s] of the scenario."""
        if self.scenario == "mms-convergence" or self.forcing == "mms":
            return abs(self.u_o) * np.pi / self.t_o
        return abs(self.u_top) / self.t_o


# ---------------------------------------------------------------------------
# defaults
# ---------------------------------------------------------------------------

def _mms_bcs():
    bcs = {(t, "u_s"): "dirichlet:mms" for t in ("bottom", "top", "left", "right")}
    bcs.update({(t, "v_f"): "dirichlet:mms" for t in ("left", "right")})
    bcs.update({(t, "v_f"): "traction:mms" for t in ("bottom", "top")})
    return bcs


def _compression_bcs():
    return {
        ("bottom", "u_s"): "dirichlet:zero:y",
        ("bottom", "v_f"): "impermeable",
        ("top", "u_s"): "dirichlet:ramp:y",
        ("top", "v_f"): "impermeable",
        ("left", "u_s"): "free",
        ("left", "v_f"): "free",
        ("right", "u_s"): "free",
        ("right", "v_f"): "free",
    }


def _scales(V, P, L):
    return {"u_s": P * L, "v_f": P * L, "p": V * L, "ip": V * L}


def default_config(scenario: str) -> ScenarioConfig:
    """Defaults of a built-in scenario."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    base = ScenarioConfig(scenario=scenario)
    if scenario == "mms-convergence":
        V = base.u_o * np.pi / base.t_o
        solver = SolverConfig(dt=1e-3, t_end=0.1, bdf_order=2, newton_tol=1e-10,
                              newton_max_iter=40, jacobian_reuse=True,
                              scales=_scales(V, base.p_o, base.L))
        return base.with_(solver=solver, bcs=_mms_bcs(), forcing="mms")
    if scenario == "channel":
        return base
    mats = {k: v.with_(kappa_s=100.0 * v.kappa_s) for k, v in reference_materials().items()}
    V = abs(base.u_top) / base.t_o
    # stress scale: stiffness times the imposed strain rate over one time unit
    solver = SolverConfig(dt=1e-3, t_end=0.1, bdf_order=2, newton_tol=1e-10, newton_max_iter=40,
                          jacobian_reuse=True, scales=_scales(V, 2.5e3 * abs(base.u_top), base.L))
    return base.with_(n=16, solver=solver, materials=mats, bcs=_compression_bcs(),
                      pins=(("u_s", 0, 0.0, 0.0),))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def serialize_config(cfg: ScenarioConfig) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["scenario"] = {"name": cfg.scenario, "out": cfg.out}
    cp["mesh"] = {"source": cfg.mesh, "L": _fmt(float(cfg.L)), "n": str(int(cfg.n)),
                  "levels": _fmt(cfg.levels)}
    sv = {}
    for f in fields(SolverConfig):
        v = getattr(cfg.solver, f.name)
        if f.name == "scales":
            for k in ("u_s", "v_f", "p", "ip"):
                sv[f"scale_{k}"] = _fmt(float(v[k]))
        else:
            sv[f.name] = _fmt(v)
    cp["solver"] = sv
    for r in sorted(cfg.materials):
        m = cfg.materials[r]
        cp[f"material.{r}"] = {f.name: _fmt(getattr(m, f.name)) for f in fields(MaterialParams)}
    cp["interface"] = {"mu_S": _fmt(float(cfg.interface.mu_S)), "mu_S_list": _fmt(cfg.mu_S_list)}
    cp["mms"] = {"u_o": _fmt(cfg.u_o), "p_o": _fmt(cfg.p_o), "ip_o": _fmt(cfg.ip_o),
                 "t_o": _fmt(cfg.t_o), "sine_regions": ", ".join(cfg.sine_regions)}
    cp["loading"] = {"u_top": _fmt(cfg.u_top), "forcing": cfg.forcing}
    cp["channel"] = {"H": _fmt(cfg.H), "eta": _fmt(cfg.eta), "delta": _fmt(cfg.delta),
                     "gamma": _fmt(cfg.gamma), "fd_points": str(cfg.fd_points)}
    cp["bc"] = {f"{t}.{f}": s for (t, f), s in sorted(cfg.bcs.items())}
    cp["pins"] = {f"pin{k}": f"{p[0]}, {int(p[1])}, {_fmt(float(p[2]))}, {_fmt(float(p[3]))}"
                  for k, p in enumerate(cfg.pins)}
    cp["output"] = {"vtk_every": str(cfg.vtk_every)}
    buf = []
    for sec in cp.sections():
        buf.append(f"[{sec}]")
        buf += [f"{k} = {v}" for k, v in cp[sec].items()]
        buf.append("")
    return "\n".join(buf)


def _floats(s, name):
    try:
        return tuple(float(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{name}: expected a comma-separated list of numbers, got {s!r}") from None


def _bool(s, name):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {s!r}")


def _num(s, name, kind=float):
    try:
        return kind(s)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {s!r} as {kind.__name__}") from None


def _from_parser(cp: configparser.ConfigParser) -> ScenarioConfig:
    def get(sec, key):
        if not cp.has_option(sec, key):
            raise ConfigError(f"missing option {sec}.{key}")
        return cp.get(sec, key)

    known = {"scenario", "mesh", "solver", "interface", "mms", "loading", "channel", "bc", "pins",
             "output"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("material."):
            raise ConfigError(f"unknown section [{sec}]")

    sv, scales = {}, {}
    for f in fields(SolverConfig):
        if f.name == "scales":
            for k in ("u_s", "v_f", "p", "ip"):
                scales[k] = _num(get("solver", f"scale_{k}"), f"solver.scale_{k}")
        elif f.name in ("jacobian_mode",):
            sv[f.name] = get("solver", f.name)
        elif f.name in ("deterministic_mode", "jacobian_reuse"):
            sv[f.name] = _bool(get("solver", f.name), f"solver.{f.name}")
        elif f.name in ("bdf_order", "newton_max_iter", "max_halvings"):
            sv[f.name] = _num(get("solver", f.name), f"solver.{f.name}", int)
        else:
            sv[f.name] = _num(get("solver", f.name), f"solver.{f.name}")
    _check_keys(cp, "solver", {f.name for f in fields(SolverConfig) if f.name != "scales"}
                | {f"scale_{k}" for k in scales})
    try:
        solver = SolverConfig(scales=scales, **sv)
    except ValueError as exc:
        raise ConfigError(f"[solver] {exc}") from None

    mats = {}
    mnames = {f.name for f in fields(MaterialParams)}
    for sec in cp.sections():
        if not sec.startswith("material."):
            continue
        _check_keys(cp, sec, mnames)
        kw = {}
        for k, v in cp[sec].items():
            kw[k] = _floats(v, f"{sec}.{k}") if k in ("b_s", "b_f") else _num(v, f"{sec}.{k}")
        try:
            mats[sec.split(".", 1)[1]] = MaterialParams(**kw)
        except ValueError as exc:
            raise ConfigError(f"[{sec}] {exc}") from None

    try:
        interface = InterfaceParams(_num(get("interface", "mu_S"), "interface.mu_S"))
    except ValueError as exc:
        raise ConfigError(f"[interface] {exc}") from None

    bcs = {}
    for key, spec in cp["bc"].items() if cp.has_section("bc") else ():
        tag, _, fld = key.rpartition(".")
        if not tag or fld not in _BC_FIELDS:
            raise ConfigError(f"bc key {key!r} must read <tag>.u_s or <tag>.v_f")
        bcs[(tag, fld)] = spec.strip()
    pins = []
    for key, spec in cp["pins"].items() if cp.has_section("pins") else ():
        parts = [s.strip() for s in spec.split(",")]
        if len(parts) != 4:
            raise ConfigError(f"pins.{key}: expected 'field, component, X, Y'")
        pins.append((parts[0], _num(parts[1], f"pins.{key}", int),
                     _num(parts[2], f"pins.{key}"), _num(parts[3], f"pins.{key}")))

    return ScenarioConfig(
        scenario=get("scenario", "name").strip(),
        out=get("scenario", "out").strip(),
        mesh=get("mesh", "source").strip(),
        L=_num(get("mesh", "L"), "mesh.L"),
        n=_num(get("mesh", "n"), "mesh.n", int),
        levels=tuple(int(x) for x in _floats(get("mesh", "levels"), "mesh.levels")),
        solver=solver,
        materials=mats,
        interface=interface,
        mu_S_list=_floats(get("interface", "mu_S_list"), "interface.mu_S_list"),
        u_o=_num(get("mms", "u_o"), "mms.u_o"),
        p_o=_num(get("mms", "p_o"), "mms.p_o"),
        ip_o=_num(get("mms", "ip_o"), "mms.ip_o"),
        t_o=_num(get("mms", "t_o"), "mms.t_o"),
        sine_regions=tuple(s.strip() for s in get("mms", "sine_regions").split(",") if s.strip()),
        u_top=_num(get("loading", "u_top"), "loading.u_top"),
        forcing=get("loading", "forcing").strip(),
        H=_floats(get("channel", "H"), "channel.H"),
        eta=_floats(get("channel", "eta"), "channel.eta"),
        delta=_floats(get("channel", "delta"), "channel.delta"),
        gamma=_floats(get("channel", "gamma"), "channel.gamma"),
        fd_points=_num(get("channel", "fd_points"), "channel.fd_points", int),
        bcs=bcs,
        pins=tuple(pins),
        vtk_every=_num(get("output", "vtk_every"), "output.vtk_every", int),
    )


def _check_keys(cp, sec, allowed):
    extra = set(cp[sec]) - set(allowed)
    if extra:
        raise ConfigError(f"unknown option(s) in [{sec}]: {sorted(extra)}")


def _new_parser():
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def parse_config(text: str) -> ScenarioConfig:
    """Parse a complete configuration (as written by :func:`serialize_config`)."""
    cp = _new_parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    try:
        return _from_parser(cp)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(scenario: str, text: str | None = None, overrides=()) -> ScenarioConfig:
    """Defaults of ``scenario``, then a (partial) INI text, then overrides.

    A ``[bc]``, ``[pins]`` or ``[material.*]`` block in ``text`` replaces
    the default block instead of merging with it.  Overrides are
    ``section.key=value`` strings and win over the text.
    """
    cp = _new_parser()
    cp.read_string(serialize_config(default_config(scenario)))
    if text:
        user = _new_parser()
        try:
            user.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        if any(s.startswith("material.") for s in user.sections()):
            for s in [s for s in cp.sections() if s.startswith("material.")]:
                cp.remove_section(s)
            for s in [s for s in user.sections() if s.startswith("material.")]:
                cp[s] = {f.name: _fmt(getattr(MaterialParams(), f.name))
                         for f in fields(MaterialParams)}
        for s in ("bc", "pins"):
            if user.has_section(s):
                cp.remove_section(s)
                cp.add_section(s)
        for s in user.sections():
            if not cp.has_section(s):
                cp.add_section(s)
            for k, v in user[s].items():
                cp[s][k] = v
    for ov in overrides:
        key, sep, val = ov.partition("=")
        sec, dot, opt = key.strip().rpartition(".")
        if not sep or not dot:
            raise ConfigError(f"override {ov!r} must read section.key=value")
        if sec.startswith("bc.") or sec == "bc":
            # bc.<tag>.<field>=spec
            sec, opt = "bc", key.strip()[3:]
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][opt] = val.strip()
    cp["scenario"]["name"] = scenario
    try:
        return _from_parser(cp)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------

def _parse_bc_spec(tag, fld, spec):
    if fld not in _BC_FIELDS:
        raise ConfigError(f"boundary field must be one of {_BC_FIELDS}, got {fld!r}")
    parts = spec.split(":")
    kind = parts[0]
    if kind == "free" and len(parts) == 1:
        return ("traction", "zero", None)
    if kind == "impermeable" and len(parts) == 1:
        if fld != "v_f":
            raise ConfigError(f"bc {tag}.{fld}: impermeable applies to v_f only")
        return ("impermeable", None, None)
    if kind == "traction" and len(parts) == 2 and parts[1] in TRACTION_CALLBACKS:
        return ("traction", parts[1], None)
    if kind == "dirichlet" and len(parts) in (2, 3) and parts[1] in DIRICHLET_CALLBACKS:
        comp = _COMPONENTS.get(parts[2] if len(parts) == 3 else "xy")
        if comp is None:
            raise ConfigError(f"bc {tag}.{fld}: components must be x, y or xy")
        if parts[1] == "ramp" and fld != "u_s":
            raise ConfigError(f"bc {tag}.{fld}: the ramp callback applies to u_s only")
        return ("dirichlet", parts[1], comp)
    raise ConfigError(f"bc {tag}.{fld}: cannot parse {spec!r}")


def _region_values(fn):
    def value(X, t, regions):
        out = np.zeros((len(X), 2))
        regions = np.asarray(regions)
        for r in sorted(set(regions.tolist())):
            sel = regions == r
            out[sel] = fn(X[sel], t, r)
        return out
    return value


def _build_bcs(cfg: ScenarioConfig, ms: ManufacturedSolution | None) -> BoundaryConditions:
    bc = BoundaryConditions()
    for (tag, fld), spec in sorted(cfg.bcs.items()):
        kind, cb, comp = _parse_bc_spec(tag, fld, spec)
        if cb == "mms" and ms is None:
            raise ConfigError(f"bc {tag}.{fld}: the mms callback needs loading.forcing = mms")
        if kind == "impermeable":
            bc.impermeable.append(Impermeable(tag))
        elif kind == "traction":
            val = None
            if cb == "mms":
                val = (lambda f: lambda X, t, n, r: ms.boundary_traction(X, t, n, r, f))(fld)
            bc.traction.append(Traction(tag, fld, val))
        else:
            val = None
            if cb == "mms":
                val = _region_values((lambda f: lambda X, t, r: ms.eval_exact(f, X, t, r))(fld))
            elif cb == "ramp":
                u_top, t_o = cfg.u_top, cfg.t_o
                val = (lambda X, t, r: np.tile([0.0, u_top * (t / t_o) ** 2], (len(X), 1)))
            bc.dirichlet.append(Dirichlet(tag, fld, comp, val))
    for f_, c, x, y in cfg.pins:
        if c not in (0, 1):
            raise ConfigError("pin component must be 0 or 1")
        bc.pins.append(Pin(f_, (x, y), c))
    return bc


def _mesh(cfg: ScenarioConfig, n: int | None = None):
    if cfg.mesh == "builtin":
        return gen_two_squares(cfg.L, cfg.n if n is None else n)
    try:
        return read_mesh(cfg.mesh)
    except OSError as exc:
        raise ConfigError(f"cannot read mesh file {cfg.mesh!r}: {exc}") from None
    except MeshError as exc:
        raise ConfigError(f"mesh file {cfg.mesh!r}: {exc}") from None


def build_problem(cfg: ScenarioConfig, mesh=None, mu_S: float | None = None) -> Problem:
    """Problem for ``cfg`` on ``mesh`` (default: the configured mesh)."""
    mesh = _mesh(cfg) if mesh is None else mesh
    missing = sorted(set(mesh.region_names) - set(cfg.materials))
    if missing:
        raise ConfigError(f"no [material.*] section for mesh region(s) {missing}")
    unused = sorted(set(cfg.materials) - set(mesh.region_names))
    if unused:
        raise ConfigError(f"material region(s) {unused} do not exist in the mesh")
    tags = {t for t, _ in cfg.bcs}
    bad = sorted(tags - set(mesh.boundary_names))
    if bad:
        raise ConfigError(f"boundary tag(s) {bad} do not exist in the mesh")
    forcing_mms = cfg.forcing == "mms" or cfg.scenario == "mms-convergence"
    ms = cfg.manufactured() if forcing_mms else None
    interface = cfg.interface if mu_S is None else InterfaceParams(mu_S)
    bcs = _build_bcs(cfg, ms)
    return Problem(mesh, cfg.materials, interface, bcs, MMSForcing(ms) if ms else None)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    """Write rows atomically; ``None`` and NaN become empty cells."""
    lines = [",".join(header)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def write_summary(path, items: dict):
    _atomic_write(path, "".join(f"{k}={_cell(v)}\n" for k, v in items.items()))


_SUBDIV = np.array([[0, 3, 5], [3, 1, 4], [5, 4, 2], [3, 4, 5]])


def visualization_mesh(problem: Problem):
    """Once-refined triangulation with interface nodes duplicated.

    Returns
    -------
    points : (P, 2) reference coordinates, one per ``v_f`` node
    cells : (4M, 3) point indices
    cell_region : (4M,) region tag of each cell
    """
    dm = problem.dofmap
    points = dm.p2_coords[dm.vf_base]
    cells = dm.elem_vf[:, _SUBDIV].reshape(-1, 3)
    return points, cells, np.repeat(problem.mesh.regions, 4)


def _two_sided_partners(problem: Problem):
    """For every visualization point, the point carrying the plus and the
    minus trace (itself away from the interface)."""
    dm, mesh = problem.dofmap, problem.mesh
    n = len(dm.vf_base)
    plus, minus = np.arange(n), np.arange(n)
    if mesh.n_facets == 0:
        return plus, minus
    ids = {(int(b), str(r)): k for k, (b, r) in enumerate(zip(dm.vf_base, dm.vf_region))}
    key = np.sort(mesh.facets, axis=1)
    lookup = {tuple(e): mesh.n_nodes + k for k, e in enumerate(dm.edges.tolist())}
    for f, (i, j) in enumerate(key.tolist()):
        rp = str(mesh.regions[mesh.facet_plus[f]])
        rm = str(mesh.regions[mesh.facet_minus[f]])
        for nd in (i, j, lookup[(i, j)]):
            kp, km = ids[(nd, rp)], ids[(nd, rm)]
            for k in (kp, km):
                plus[k], minus[k] = kp, km
    return plus, minus


def _nodal_fields(problem: Problem, state: State):
    dm = problem.dofmap
    u, vf, p, _ = dm.split(state.z)
    nv = len(dm.vf_base)
    pv = np.zeros(nv)
    # P1 pressure at the P2 points of each element, region by region
    loc = np.zeros((len(dm.elem_p), 6))
    pe = p[dm.elem_p]
    loc[:, :3] = pe
    loc[:, 3] = 0.5 * (pe[:, 0] + pe[:, 1])
    loc[:, 4] = 0.5 * (pe[:, 1] + pe[:, 2])
    loc[:, 5] = 0.5 * (pe[:, 2] + pe[:, 0])
    pv[dm.elem_vf.ravel()] = loc.ravel()
    return {"u_s": u[dm.vf_base], "v_s": np.asarray(state.vs)[dm.vf_base], "v_f": vf.copy(), "p": pv}


def write_vtk(path, problem: Problem, state: State, title: str = "poromix fields"):
    """Legacy ASCII unstructured grid of a state on the visualization mesh.

    ``u_s`` and ``v_s`` are single valued; ``v_f`` and ``p`` are written
    as ``*_plus`` and ``*_minus`` arrays that hold the two interface traces
    on interface points and coincide elsewhere.  Cell data holds the region
    index into the sorted region names.
    """
    points, cells, cregion = visualization_mesh(problem)
    vals = _nodal_fields(problem, state)
    plus, minus = _two_sided_partners(problem)
    names = sorted(set(cregion.tolist()))
    P, C = len(points), len(cells)
    out = ["# vtk DataFile Version 3.0", f"{title} t={state.t!r}", "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {P} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in points.tolist()]
    out.append(f"CELLS {C} {4 * C}")
    out += [f"3 {a} {b} {c}" for a, b, c in cells.tolist()]
    out.append(f"CELL_TYPES {C}")
    out += ["5"] * C
    out.append(f"CELL_DATA {C}")
    out += ["SCALARS region int 1", "LOOKUP_TABLE default"]
    out += [str(names.index(r)) for r in cregion.tolist()]
    out.append(f"POINT_DATA {P}")

    def vec(name, a):
        out.append(f"VECTORS {name} double")
        out.extend(f"{x!r} {y!r} 0.0" for x, y in a.tolist())

    def scal(name, a):
        out.extend([f"SCALARS {name} double 1", "LOOKUP_TABLE default"])
        out.extend(repr(float(x)) for x in a)

    vec("u_s", vals["u_s"])
    vec("v_s", vals["v_s"])
    vec("v_f_plus", vals["v_f"][plus])
    vec("v_f_minus", vals["v_f"][minus])
    scal("p_plus", vals["p"][plus])
    scal("p_minus", vals["p"][minus])
    _atomic_write(path, "\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    """Final state and per-step solver records of one time integration."""

    problem: Problem
    state: State
    infos: list
    wall: float

    @property
    def iterations(self) -> int:
        return sum(i.iterations for i in self.infos)

    @property
    def max_ip_residual(self) -> float:
        return max((i.ip_residual for i in self.infos), default=0.0)


def _integrate(problem, state, solver, callback=None) -> RunResult:
    t0 = time.perf_counter()
    state, infos = integrate(problem, state, solver, callback)
    return RunResult(problem, state, infos, time.perf_counter() - t0)


ERROR_COLUMNS = (("u_s", "L2"), ("u_s", "H1"), ("v_f", "L2"), ("v_f", "H1"),
                 ("p", "L2"), ("p", "H1"), ("ip", "L2"))


@dataclass
class ConvergenceResult:
    levels: list
    h: list
    errors: list  # per level: error_norms dict
    rates: dict  # (field, norm) -> list of pairwise rates
    runs: list

    def series(self, fld: str, norm: str) -> list:
        return [e[fld][norm] for e in self.errors]


def run_mms_convergence(cfg: ScenarioConfig, write: bool = True) -> ConvergenceResult:
    """Manufactured-solution errors and observed rates over ``cfg.levels``."""
    if cfg.mesh != "builtin":
        raise ConfigError("the convergence study runs on the builtin two-square mesh")
    ms = cfg.manufactured()
    out = Path(cfg.out)
    levels, hs, errs, runs = [], [], [], []
    for n in cfg.levels:
        mesh = gen_two_squares(cfg.L, n)
        pb = build_problem(cfg, mesh)
        st = mms_initial_state(pb, ms, cfg.solver.dt)
        log.info("level n=%d: %d dofs", n, pb.dofmap.total_dofs)
        try:
            res = _integrate(pb, st, cfg.solver)
        except SOLVER_ERRORS as exc:
            raise type(exc)(f"level n={n}: {exc}") from exc
        e = error_norms(pb, res.state.z, ms, res.state.t)
        levels.append(n)
        hs.append(cfg.L / n)
        errs.append(e)
        runs.append(res)
        log.info("level n=%d done in %.1f s", n, res.wall)
    rates = {}
    for fld, norm in ERROR_COLUMNS:
        if len(levels) > 1:
            rates[(fld, norm)] = convergence_rates([(h, e[fld][norm]) for h, e in zip(hs, errs)])
        else:
            rates[(fld, norm)] = []
    result = ConvergenceResult(levels, hs, errs, rates, runs)
    if write:
        header = ["n [-]", "h [m]"] + [f"{f}_{nm} [-]" for f, nm in ERROR_COLUMNS] \
            + [f"rate_{f}_{nm} [-]" for f, nm in ERROR_COLUMNS] + ["max_ip_residual [m^2/s]"]
        rows = []
        for k, (n, h, e, r) in enumerate(zip(levels, hs, errs, runs)):
            rr = [rates[c][k - 1] if k > 0 else None for c in ERROR_COLUMNS]
            rows.append([n, h] + [e[f][nm] for f, nm in ERROR_COLUMNS] + rr + [r.max_ip_residual])
        write_csv(out / "convergence.csv", header, rows)
        last = runs[-1]
        write_vtk(out / f"fields_{len(last.infos)}.vtk", last.problem, last.state)
        write_summary(out / "summary.txt", {
            "scenario": cfg.scenario, "levels": " ".join(map(str, levels)),
            "steps": sum(len(r.infos) for r in runs),
            "newton_iterations": sum(r.iterations for r in runs),
            "factorizations": sum(sum(i.factorizations for i in r.infos) for r in runs),
            "max_ip_residual": max(r.max_ip_residual for r in runs),
            "wall_time": sum(r.wall for r in runs),
        })
    return result


@dataclass
class ChannelRecord:
    params: tuple
    dissipative: object
    pseudo: object
    oracle_difference: float
    pseudo_difference: float  # relative to max |V|


def run_channel(cfg: ScenarioConfig, write: bool = True) -> list:
    """Dissipative and pseudo-no-slip profiles for every parameter tuple."""
    for name in ("H", "eta", "delta", "gamma"):
        if not getattr(cfg, name):
            raise ConfigError(f"channel.{name} must list at least one value")
    grid = [(H, e, d, g) for H in cfg.H for e in cfg.eta for d in cfg.delta for g in cfg.gamma]
    recs, prof_rows = [], []
    for H, eta, d, g in grid:
        try:
            pb = ChannelProblem(H, eta, d, g)
        except ChannelError as exc:
            raise ConfigError(str(exc)) from None
        sol = solve_channel(pb)
        pns = solve_pseudo_no_slip(pb)
        orc = solve_channel_fd_oracle(pb, cfg.fd_points)
        Z, V = sol.profile()
        _, Vp = pns.profile()
        rel = float(np.abs(V - Vp).max() / np.abs(V).max())
        recs.append(ChannelRecord((H, eta, d, g), sol, pns, orc.max_difference(sol), rel))
        for model, vv in (("dissipative", V), ("pseudo-no-slip", Vp)):
            prof_rows += [[H, eta, d, g, model, z, v] for z, v in zip(Z.tolist(), vv.tolist())]
    if write:
        out = Path(cfg.out)
        write_csv(out / "channel_profiles.csv",
                  ["H [-]", "eta [-]", "delta [-]", "gamma [-]", "model", "Z [-]", "V [-]"],
                  prof_rows)
        write_csv(out / "channel_jumps.csv",
                  ["H [-]", "eta [-]", "delta [-]", "gamma [-]", "jump [-]",
                   "oracle_max_abs_diff [-]", "pseudo_no_slip_rel_diff [-]"],
                  [list(r.params) + [r.dissipative.jump, r.oracle_difference, r.pseudo_difference]
                   for r in recs])
        write_summary(out / "summary.txt", {"scenario": cfg.scenario, "tuples": len(recs),
                                            "max_oracle_diff": max(r.oracle_difference for r in recs)})
    return recs


@dataclass
class SweepPoint:
    mu_S: float
    status: str
    norm_vflt_t: float = float("nan")
    norm_p: float = float("nan")
    norm_flux: float = float("nan")
    run: RunResult | None = None
    jumps: object = None


def run_viscosity_sweep(cfg: ScenarioConfig, write: bool = True) -> list:
    """Interface jump norms at the final time for each ``mu_S``.

    Solver failures are recorded as the point's status; the sweep goes on.
    """
    if not cfg.mu_S_list:
        raise ConfigError("interface.mu_S_list is empty")
    mesh = _mesh(cfg)
    if mesh.n_facets == 0:
        raise ConfigError("the sweep needs a mesh with an interface")
    out = Path(cfg.out)
    points = []
    for k, mu in enumerate(cfg.mu_S_list):
        pb = build_problem(cfg, mesh, mu_S=mu)
        try:
            res = _integrate(pb, pb.initial_state(), cfg.solver)
        except SOLVER_ERRORS as exc:
            log.warning("mu_S=%g failed: %s", mu, exc)
            points.append(SweepPoint(mu, f"failed: {type(exc).__name__}"))
            continue
        jr = jump_report(pb, res.state)
        points.append(SweepPoint(mu, "ok", jr.norm_vflt_t, jr.norm_p, jr.norm_flux, res, jr))
        log.info("mu_S=%g: |[v_flt_t]|=%.3e |[p]|=%.3e (%.1f s)", mu, jr.norm_vflt_t, jr.norm_p,
                 res.wall)
        if write:
            write_csv(out / f"jump_profile_{k}.csv",
                      ["arc_length [m]", "jump_vflt_t [m/s]", "jump_p [Pa]"],
                      zip(jr.s.tolist(), jr.jump_vflt_t.tolist(), jr.jump_p.tolist()))
    if write:
        write_csv(out / "sweep.csv",
                  ["mu_S [Pa s/m]", "status", "jump_vflt_t_L2 [m^1.5/s]", "jump_p_L2 [Pa m^0.5]",
                   "normal_flux_L2 [m^1.5/s]", "newton_iterations [-]", "max_ip_residual [m^2/s]"],
                  [[p.mu_S, p.status, p.norm_vflt_t, p.norm_p, p.norm_flux,
                    p.run.iterations if p.run else None,
                    p.run.max_ip_residual if p.run else None] for p in points])
        ok = [p for p in points if p.run]
        write_summary(out / "summary.txt", {
            "scenario": cfg.scenario, "points": len(points), "failed": len(points) - len(ok),
            "steps": sum(len(p.run.infos) for p in ok),
            "newton_iterations": sum(p.run.iterations for p in ok),
            "wall_time": sum(p.run.wall for p in ok),
        })
    return points


def run_simulation(cfg: ScenarioConfig, write: bool = True) -> RunResult:
    """Single time integration with energy history and field snapshots."""
    pb = build_problem(cfg)
    if cfg.forcing == "mms":
        st = mms_initial_state(pb, cfg.manufactured(), cfg.solver.dt)
    else:
        st = pb.initial_state()
    out = Path(cfg.out)
    energy_rows = []

    def record(k, state, info):
        e = energy_audit(pb, state)
        energy_rows.append([state.t, e.K_s, e.K_f, e.Psi, e.D_vol, e.D_int, e.E_total])
        if write and cfg.vtk_every > 0 and k % cfg.vtk_every == 0:
            write_vtk(out / f"fields_{k}.vtk", pb, state)

    record(0, st, None)
    res = _integrate(pb, st, cfg.solver, record)
    if write:
        n = len(res.infos)
        write_csv(out / "energy.csv", ["t [s]", "K_s [J/m]", "K_f [J/m]", "Psi [J/m]",
                                       "D_vol [W/m]", "D_int [W/m]", "E_total [J/m]"], energy_rows)
        if cfg.vtk_every <= 0 or n % cfg.vtk_every:
            write_vtk(out / f"fields_{n}.vtk", pb, res.state)
        if pb.mesh.n_facets:
            jr = jump_report(pb, res.state)
            write_csv(out / "jump_profile.csv",
                      ["arc_length [m]", "jump_vflt_t [m/s]", "jump_p [Pa]"],
                      zip(jr.s.tolist(), jr.jump_vflt_t.tolist(), jr.jump_p.tolist()))
        write_summary(out / "summary.txt", {
            "scenario": cfg.scenario, "steps": n, "newton_iterations": res.iterations,
            "factorizations": sum(i.factorizations for i in res.infos),
            "max_ip_residual": res.max_ip_residual, "wall_time": res.wall,
        })
    return res


_RUNNERS = {"mms-convergence": run_mms_convergence, "channel": run_channel,
            "sweep": run_viscosity_sweep, "run": run_simulation}


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _arg_parser():
    ap = argparse.ArgumentParser(prog="poromix",
                                 description="Biphasic mixture simulations with a permeable interface.")
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--config", help="INI file; omitted options keep the scenario defaults")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one option (repeatable, wins over --config)")
    ap.add_argument("--out", help="output directory (overrides scenario.out)")
    ap.add_argument("--dump-config", action="store_true",
                    help="print the resolved configuration and exit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def main(argv=None) -> int:
    args = _arg_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text() if args.config else None
        sets = list(args.set) + ([f"scenario.out={args.out}"] if args.out else [])
        cfg = load_config(args.scenario, text, sets)
        if args.dump_config:
            sys.stdout.write(serialize_config(cfg))
            return EXIT_OK
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        _atomic_write(Path(cfg.out) / "config.ini", serialize_config(cfg))
        result = _RUNNERS[cfg.scenario](cfg)
    except (ConfigError, OSError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if cfg.scenario == "sweep" and any(p.status != "ok" for p in result):
        print("solver failure at one or more sweep points (see sweep.csv)", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
