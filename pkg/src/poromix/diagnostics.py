"""Post-processing of converged states: energy, dissipation and interface jumps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import FRICTION_PREFACTOR, Problem, State, _point_fields, _stresses
from .constitutive import strain_energy

__all__ = [
    "EnergyReport",
    "JumpReport",
    "InterfaceForce",
    "energy_audit",
    "jump_report",
    "interface_force",
    "interface_order",
]


@dataclass(frozen=True)
class EnergyReport:
    """Energies [J/m] and dissipation rates [W/m] per unit thickness."""

    K_s: float
    K_f: float
    Psi: float
    D_vol: float
    D_int: float

    @property
    def E_total(self) -> float:
        return self.K_s + self.K_f + self.Psi

    @property
    def D_total(self) -> float:
        return self.D_vol + self.D_int


def _state_sc(problem: Problem):
    # rates built from the stored solid velocity: v_s = hu, no accelerations
    return dict(dt=1.0, c0=0.0, mu_S=float(problem.interface.mu_S), Nip=problem.f_Nip)


def _state_hist(problem: Problem, state: State, elem):
    dm = problem.dofmap
    vs = np.asarray(state.vs)[dm.elem_p2[elem]]
    zero = np.zeros_like(vs)
    return vs, zero, np.zeros((len(elem), 6, 2))


def energy_audit(problem: Problem, state: State) -> EnergyReport:
    """Kinetic and strain energies and dissipation rates of a state.

    Dissipation densities are the volumetric viscous and drag terms and
    the interface friction ``(mu_S / 2) |[[v_flt]]|^2`` per deformed length.
    """
    dm = problem.dofmap
    g, mat = problem.vgeo, problem.vmat
    md = mat.as_dict()
    zl = state.z[dm.elem_dofs]
    f = _point_fields(np, problem._vgeo_d, md, zl, _state_hist(problem, state, g.elem),
                      _state_sc(problem))
    s = _stresses(np, f, md)
    w, J = g.w, f["J"]
    rho_s = mat.rs[:, None] * f["phis"]
    rho_f = mat.rf[:, None] * f["phif"]
    K_s = 0.5 * np.sum(w * J * rho_s * (f["vs"] ** 2).sum(-1))
    K_f = 0.5 * np.sum(w * J * rho_f * (f["vf"] ** 2).sum(-1))
    psi = strain_energy(f["F"], mat.muRe[:, None])
    Psi = np.sum(w * mat.phiR[:, None] * psi)
    drag = mat.muD[:, None] * f["phif"] ** 2 / mat.kap[:, None]
    rel = s["Df"] - s["Ds"]
    dens = (2 * s["muf"] * (s["Df"] ** 2).sum((-1, -2)) + 2 * s["muB"] * (rel**2).sum((-1, -2))
            + drag * (s["W"] ** 2).sum(-1))
    D_vol = np.sum(w * J * dens)
    D_int = 0.0
    if problem.mesh.n_facets:
        jr = _facet_samples(problem, state)
        D_int = float(np.sum(jr["w"] * jr["Nabs"] * 0.5 * problem.interface.mu_S
                             * (jr["jv"] ** 2).sum(-1)))
    return EnergyReport(float(K_s), float(K_f), float(Psi), float(D_vol), D_int)


def _facet_samples(problem: Problem, state: State) -> dict:
    """Two-sided interface quantities at the facet quadrature points."""
    dm = problem.dofmap
    gp, gm = problem.fgeo_p, problem.fgeo_m
    mp, mm = problem._fmat_d
    sc = _state_sc(problem)
    zl = state.z[problem.fdofs]
    fp = _point_fields(np, problem._fgeo_d[0], mp, zl[:, :27], _state_hist(problem, state, gp.elem), sc)
    fm = _point_fields(np, problem._fgeo_d[1], mm, zl[:, 27:54], _state_hist(problem, state, gm.elem), sc)
    m_s = problem.f_normal
    N = fm["J"][..., None] * np.einsum("kqji,kj->kqi", fm["Finv"], m_s)
    Nabs = np.sqrt((N**2).sum(-1))
    m = N / Nabs[..., None]
    vs = fm["vs"]
    vfltp = fp["phif"][..., None] * (fp["vf"] - vs)
    vfltm = fm["phif"][..., None] * (fm["vf"] - vs)
    ip = np.einsum("qa,ka->kq", problem.f_Nip, zl[:, 54:56])
    kfp = 0.5 * mp["rf"][:, None] * fp["phif"] * (fp["vf"] ** 2).sum(-1)
    kfm = 0.5 * mm["rf"][:, None] * fm["phif"] * (fm["vf"] ** 2).sum(-1)
    u = dm.split(state.z)[0][dm.elem_p2[gm.elem]]
    x = gm.X + np.einsum("kqa,kai->kqi", gm.N2, u)
    return dict(w=gm.w, X=gm.X, x=x, N=N, Nabs=Nabs, m=m, jv=vfltp - vfltm, jp=fp["p"] - fm["p"],
                jphi=fp["phif"] - fm["phif"], jkf=kfp - kfm, ip=ip)


def interface_order(problem: Problem) -> np.ndarray:
    """Facet indices ordered along the interface curve.

    Each connected piece is walked from an end vertex (or from an arbitrary
    facet if it is closed); pieces follow each other.
    """
    fc = problem.mesh.facets
    nF = len(fc)
    adj: dict = {}
    for k, (a, b) in enumerate(fc.tolist()):
        adj.setdefault(a, []).append(k)
        adj.setdefault(b, []).append(k)
    used = np.zeros(nF, bool)
    order = []
    X = problem.mesh.nodes
    ends = sorted((v for v, ks in adj.items() if len(ks) == 1), key=lambda v: (X[v, 0], X[v, 1]))
    starts = ends + sorted(adj, key=lambda v: (X[v, 0], X[v, 1]))
    for v0 in starts:
        v = v0
        while True:
            nxt = [k for k in adj[v] if not used[k]]
            if not nxt:
                break
            k = nxt[0]
            used[k] = True
            order.append((k, v))
            a, b = fc[k]
            v = b if a == v else a
    return np.array(order, np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class JumpReport:
    """Interface jumps sampled at facet quadrature points, ordered by arc length.

    ``s`` is the deformed arc length, ``x`` the deformed position.  Norms are
    L2 over the deformed interface.
    """

    s: np.ndarray
    x: np.ndarray
    jump_vflt_t: np.ndarray
    jump_p: np.ndarray
    normal_flux: np.ndarray
    length: float
    norm_vflt_t: float
    norm_p: float
    norm_flux: float


def jump_report(problem: Problem, state: State) -> JumpReport:
    """Tangential filtration-velocity jump, pressure jump and normal flux."""
    if problem.mesh.n_facets == 0:
        raise ValueError("the mesh has no interface")
    f = _facet_samples(problem, state)
    m, jv = f["m"], f["jv"]
    jn = (jv * m).sum(-1)
    jt = jv - jn[..., None] * m
    t = np.stack([-m[..., 1], m[..., 0]], -1)
    dl = f["w"] * f["Nabs"]
    order = interface_order(problem)
    q = dl.shape[1]
    seg = problem.fseg.points
    s_list, idx = [], []
    s0 = 0.0
    for k, v in order.tolist():
        lk = dl[k].sum()
        # quadrature parameter runs from facet node 0 to node 1
        frac = seg if problem.mesh.facets[k, 0] == v else 1.0 - seg
        o = np.argsort(frac)
        s_list.append(s0 + lk * frac[o])
        idx.append(k * q + o)
        s0 += lk
    idx = np.concatenate(idx)
    flat = lambda a: a.reshape((-1,) + a.shape[2:])[idx]  # noqa: E731
    return JumpReport(
        s=np.concatenate(s_list), x=flat(f["x"]), jump_vflt_t=flat((jt * t).sum(-1)),
        jump_p=flat(f["jp"]), normal_flux=flat(jn), length=float(dl.sum()),
        norm_vflt_t=float(np.sqrt(np.sum(dl * (jt**2).sum(-1)))),
        norm_p=float(np.sqrt(np.sum(dl * f["jp"] ** 2))),
        norm_flux=float(np.sqrt(np.sum(dl * jn**2))),
    )


@dataclass(frozen=True)
class InterfaceForce:
    """Interface force on the fluid at facet quadrature points.

    ``tangential + normal`` equals ``(mu_S/2)[[phi_f]][[v_flt]] - [[k_f + phi_f ip]] m``.
    """

    X: np.ndarray
    tangential: np.ndarray
    normal: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.tangential + self.normal


def interface_force(problem: Problem, state: State) -> InterfaceForce:
    """Split of the fluid interface force into tangential and normal parts.

    The multiplier is single valued, so ``[[phi_f ip]] = [[phi_f]] ip``.
    """
    if problem.mesh.n_facets == 0:
        raise ValueError("the mesh has no interface")
    f = _facet_samples(problem, state)
    m = f["m"]
    fr = FRICTION_PREFACTOR * problem.interface.mu_S * f["jphi"]
    fric = fr[..., None] * f["jv"]
    fn = (fric * m).sum(-1)
    tang = fric - fn[..., None] * m
    normal = (fn - (f["jkf"] + f["jphi"] * f["ip"]))[..., None] * m
    scale = max(float(np.abs(tang).max()), float(np.abs(normal).max()), 1e-300)
    if np.abs((tang * m).sum(-1)).max() > 1e-12 * scale:
        raise ArithmeticError("tangential and normal parts are not orthogonal")
    K, q = m.shape[:2]
    return InterfaceForce(f["X"].reshape(K * q, 2), tang.reshape(K * q, 2), normal.reshape(K * q, 2))
