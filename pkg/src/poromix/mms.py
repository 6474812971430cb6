"""Manufactured solution on the two-square geometry.

The displacement is a travelling sinusoid in the referential coordinates,
the pore pressure a sinusoid of the *spatial* coordinates (cosine in region
``A``, sine in region ``B``), and the fluid velocity follows from Darcy's law
so that the filtration velocity equals ``-(kappa/mu_D) grad p``.  The
interface multiplier is a cosine along the interface.

All fields depend on the referential point only through ``k (X + Y)``,
which reduces every spatial derivative to a scalar chain rule.  Derivatives
are written out in closed form and checked against finite differences in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import (
    BoundaryConditions,
    Dirichlet,
    Problem,
    Snapshot,
    State,
    Traction,
    FRICTION_PREFACTOR,
)
from .constitutive import InterfaceParams, MaterialParams
from .spaces import collapsed_triangle_rule, edge_barycentric, p1_tri, p2_tri, segment_rule, affine_maps

__all__ = [
    "ManufacturedSolution",
    "reference_materials",
    "MMSForcing",
    "mms_boundary_conditions",
    "mms_problem",
    "interpolate_exact",
    "mms_initial_state",
    "error_norms",
    "convergence_rates",
    "ERROR_FIELDS",
]

ERROR_FIELDS = ("u_s", "v_f", "p", "ip")


def reference_materials() -> dict:
    """Material constants of the two regions of the manufactured problem."""
    shared = dict(rho_s_star=1e3, rho_f_star=1e3, mu_D=1e-2, mu_B_bar=1e-2, mu_f_bar=1e-2)
    return {
        "A": MaterialParams(phi_Rs=0.4, kappa_s=1e-9, mu_Re=1e3, **shared),
        "B": MaterialParams(phi_Rs=0.8, kappa_s=1e-11, mu_Re=1e4, **shared),
    }


@dataclass(frozen=True)
class ManufacturedSolution:
    """Closed-form fields with amplitudes and geometry.

    Attributes
    ----------
    u_o, p_o, ip_o : float
        Amplitudes of displacement [m], pressure [Pa] and multiplier [Pa].
    L : float
        Side of each square [m]; the interface is ``Y = L``.
    t_o : float
        Time scale [s].
    materials : dict
        Region tag to :class:`MaterialParams`.
    interface : InterfaceParams
    sine_regions : tuple of str
        Regions whose pressure uses the sine form.
    """

    u_o: float = 1e-3
    p_o: float = 2.5e3
    ip_o: float = 1e3
    L: float = 1e-2
    t_o: float = 1.0
    materials: dict = field(default_factory=reference_materials)
    interface: InterfaceParams = field(default_factory=lambda: InterfaceParams(1e3))
    sine_regions: tuple = ("B",)

    # -- closed form (numpy) ---------------------------------------------

    def _time(self, t):
        w = np.pi / self.t_o
        return 1 - np.cos(w * t), w * np.sin(w * t), w * w * np.cos(w * t)

    def _consts(self, region):
        if region not in self.materials:
            raise KeyError(f"unknown region {region!r}")
        return self.materials[region], region in self.sine_regions

    def p_spatial(self, x, t, region):
        """Pressure at spatial points ``x (n, 2)``."""
        x = np.atleast_2d(np.asarray(x, float))
        _, sine = self._consts(region)
        T = self._time(t)[0]
        eta = np.pi / self.L * (x[:, 0] + x[:, 1])
        return self.p_o * T * (np.sin(eta) if sine else np.cos(eta))

    def eval_exact(self, field: str, X, t: float, region: str = "A"):
        """Exact field values at referential points ``X (n, 2)``.

        Fields: ``u_s``, ``v_s``, ``a_s``, ``x`` (spatial position),
        ``F``, ``J``, ``phi_f``, ``p``, ``grad_p`` (spatial gradient),
        ``v_f``, ``v_flt`` and ``ip`` (interface points only).  ``p`` and
        ``v_f`` are evaluated at ``x = X + u_s(X, t)``.
        """
        X = np.atleast_2d(np.asarray(X, float))
        mat, sine = self._consts(region)
        T, Td, Tdd = self._time(t)
        k = np.pi / self.L
        xi = k * (X[:, 0] + X[:, 1])
        e = np.stack([np.cos(xi), np.sin(xi)], 1)
        de = np.stack([-np.sin(xi), np.cos(xi)], 1)
        if field == "u_s":
            return self.u_o * T * e
        if field == "v_s":
            return self.u_o * Td * e
        if field == "a_s":
            return self.u_o * Tdd * e
        x = X + self.u_o * T * e
        if field == "x":
            return x
        if field == "F":
            g = self.u_o * T * k * de
            F = np.empty((len(X), 2, 2))
            F[:, 0, 0] = 1 + g[:, 0]
            F[:, 0, 1] = g[:, 0]
            F[:, 1, 0] = g[:, 1]
            F[:, 1, 1] = 1 + g[:, 1]
            return F
        J = 1 + self.u_o * T * k * (de[:, 0] + de[:, 1])
        if field == "J":
            return J
        phi_f = 1 - mat.phi_Rs / J
        if field == "phi_f":
            return phi_f
        if field == "ip":
            if np.any(np.abs(X[:, 1] - self.L) > 1e-12 * self.L):
                raise ValueError("the multiplier is defined on the interface Y = L only")
            return self.ip_o * T * np.cos(k * x[:, 0])
        eta = k * (x[:, 0] + x[:, 1])
        if field == "p":
            return self.p_o * T * (np.sin(eta) if sine else np.cos(eta))
        dg = np.cos(eta) if sine else -np.sin(eta)
        grad_p = (self.p_o * T * k * dg)[:, None] * np.ones(2)
        if field == "grad_p":
            return grad_p
        v_flt = -(mat.kappa_s / mat.mu_D) * grad_p
        if field == "v_flt":
            return v_flt
        if field == "v_f":
            return self.u_o * Td * e + v_flt / phi_f[:, None]
        raise KeyError(f"unknown field {field!r}")

    # -- derived quantities ------------------------------------------------

    def source_terms(self, X, t: float, region: str):
        """Volume sources ``(s_u, s_f, s_p)`` per unit reference volume.

        ``s_u`` and ``s_f`` are the mixture and fluid momentum residuals of
        the exact fields and ``s_p = Div(J F^{-1} v_va)``.
        """
        return _volume_sources(self, X, t, region)

    def interface_sources(self, X, t: float, m_s, region_plus: str = "B", region_minus: str = "A"):
        """Interface sources ``(s_u, s_f_plus, s_f_minus, s_ip)`` per unit reference length."""
        return _interface_sources(self, X, t, m_s, region_plus, region_minus)

    def boundary_traction(self, X, t: float, n_s, region: str, field: str = "v_f"):
        """Exact traction per unit reference length on a boundary with normal ``n_s``.

        ``field='v_f'`` gives the total fluid traction, ``'u_s'`` the total
        mixture traction.
        """
        mix, fluid = _tractions(self, X, t, n_s, region)
        return fluid if field == "v_f" else mix

    def derivatives(self, X, t: float, region: str) -> dict:
        """Differentiated quantities used by the sources (for verification)."""
        f = _pointwise(self, X, t, region)
        return {k: f[k] for k in _DERIV_NAMES}

    def exact_gradients(self, X, t: float, region: str):
        """Referential gradients of ``u_s``, ``v_f`` (2x2) and ``p`` (2,)."""
        d = self.derivatives(X, t, region)
        return d["grad_u"], d["grad_vf"], d["grad_p_ref"]


_DERIV_NAMES = ("v_s", "a_s", "grad_u", "grad_p_ref", "grad_vs", "grad_vf", "dt_vf",
                "div_P_mix", "div_Q_fluid", "div_JFinv_vva", "P_mix", "Q_fluid", "JFinv_vva")


def _outer_e(v):
    """``v (n, 2)`` times the row ``(1, 1)``."""
    return np.repeat(v[:, :, None], 2, axis=2)


def _adj(A):
    out = np.empty_like(A)
    out[:, 0, 0] = A[:, 1, 1]
    out[:, 1, 1] = A[:, 0, 0]
    out[:, 0, 1] = -A[:, 0, 1]
    out[:, 1, 0] = -A[:, 1, 0]
    return out


def _mm(A, B):
    return np.einsum("nij,njk->nik", A, B)


def _mT(A):
    return np.swapaxes(A, -1, -2)


def _sym(A):
    return 0.5 * (A + _mT(A))


def _pointwise(ms: ManufacturedSolution, X, t: float, region: str) -> dict:
    """Exact kinematics, stresses and their derivatives at referential points.

    Every field depends on ``X`` only through ``s = k (X + Y)``, ``k = pi/L``,
    so ``Grad_X f = k f_s (x) (1, 1)`` and ``Div_X M = k M_s (1, 1)``.  The
    ``_s`` and ``_t`` suffixes denote partial derivatives in ``s`` and ``t``.
    """
    X = np.atleast_2d(np.asarray(X, float))
    mat, sine = ms._consts(region)
    k = np.pi / ms.L
    T, Tt, Ttt = ms._time(t)
    s = k * (X[:, 0] + X[:, 1])
    c, sn = np.cos(s), np.sin(s)
    E = np.ones(2)
    I = np.eye(2)
    uo = ms.u_o

    ec = np.stack([c, sn], 1)
    es = np.stack([-sn, c], 1)
    ecc = -ec

    # deformation
    A, At = uo * T * k, uo * Tt * k
    F = I + _outer_e(A * es)
    F_s = _outer_e(A * ecc)
    J = 1 + A * (c - sn)
    J_s = -A * (sn + c)
    J_ss = A * (sn - c)
    J_t = At * (c - sn)
    J_st = -At * (sn + c)

    # pressure: p = p_o T g(eta), eta = k (x + y); note d eta / ds = J
    eta = s + A * (c + sn)
    eta_t = At * (c + sn)
    ce, se = np.cos(eta), np.sin(eta)
    if sine:
        g0, g1, g2, g3 = se, ce, -se, -ce
    else:
        g0, g1, g2, g3 = ce, -se, -ce, se
    pk = ms.p_o * k
    p = ms.p_o * T * g0
    pi = pk * T * g1                      # spatial gradient is pi (1, 1)
    pi_s = pk * T * g2 * J
    pi_ss = pk * T * (g3 * J**2 + g2 * J_s)
    pi_t = pk * (Tt * g1 + T * g2 * eta_t)
    pi_st = pk * (Tt * g2 * J + T * (g3 * eta_t * J + g2 * J_t))

    # fluid fraction
    phiR = mat.phi_Rs
    phf = 1 - phiR / J
    phf_s = phiR * J_s / J**2
    phf_ss = phiR * (J_ss / J**2 - 2 * J_s**2 / J**3)
    phf_t = phiR * J_t / J**2
    phf_st = phiR * (J_st / J**2 - 2 * J_s * J_t / J**3)

    # q = pi / phi_f, so that v_f - v_s = -beta q (1, 1)
    q = pi / phf
    q_s = pi_s / phf - pi * phf_s / phf**2
    q_ss = (pi_ss / phf - 2 * pi_s * phf_s / phf**2 - pi * phf_ss / phf**2
            + 2 * pi * phf_s**2 / phf**3)
    q_t = pi_t / phf - pi * phf_t / phf**2
    q_st = (pi_st / phf - pi_s * phf_t / phf**2 - pi_t * phf_s / phf**2 - pi * phf_st / phf**2
            + 2 * pi * phf_s * phf_t / phf**3)
    beta = mat.kappa_s / mat.mu_D

    # velocities
    v_s = uo * Tt * ec
    v_s_s = uo * Tt * es
    v_s_ss = uo * Tt * ecc
    a_s = uo * Ttt * ec
    v_f = v_s - beta * q[:, None] * E
    v_f_s = v_s_s - beta * q_s[:, None] * E
    v_f_ss = v_s_ss - beta * q_ss[:, None] * E
    v_f_t = a_s - beta * q_t[:, None] * E
    W = v_f - v_s

    gvs, gvs_s = k * _outer_e(v_s_s), k * _outer_e(v_s_ss)
    gvf, gvf_s = k * _outer_e(v_f_s), k * _outer_e(v_f_ss)
    Fi = _adj(F) / J[:, None, None]
    Fi_s = -_mm(_mm(Fi, F_s), Fi)
    Lf, Lf_s = _mm(gvf, Fi), _mm(gvf_s, Fi) + _mm(gvf, Fi_s)
    Ls, Ls_s = _mm(gvs, Fi), _mm(gvs_s, Fi) + _mm(gvs, Fi_s)
    Df, Df_s, Ds, Ds_s = _sym(Lf), _sym(Lf_s), _sym(Ls), _sym(Ls_s)
    af = v_f_t + np.einsum("nij,nj->ni", Lf, W)

    # stresses
    w = lambda a: a[:, None, None]  # noqa: E731
    ph2, ph2_s = phf**2, 2 * phf * phf_s
    B = _mm(F, _mT(F))
    B_s = _mm(F_s, _mT(F)) + _mm(F, _mT(F_s))
    trB, trB_s = B[:, 0, 0] + B[:, 1, 1], B_s[:, 0, 0] + B_s[:, 1, 1]
    jm = J ** (-5.0 / 3.0)
    jm_s = -5.0 / 3.0 * J ** (-8.0 / 3.0) * J_s
    dev = B - w((trB + 1) / 3) * I
    dev_s = B_s - w(trB_s / 3) * I
    Te = phiR * mat.mu_Re * w(jm) * dev
    Te_s = phiR * mat.mu_Re * (w(jm_s) * dev + w(jm) * dev_s)
    mf, mB = mat.mu_f_bar, mat.mu_B_bar
    Tfv = 2 * mf * w(ph2) * Df + 2 * mB * w(ph2) * (Df - Ds)
    Tfv_s = (2 * mf * (w(ph2_s) * Df + w(ph2) * Df_s)
             + 2 * mB * (w(ph2_s) * (Df - Ds) + w(ph2) * (Df_s - Ds_s)))
    Tmix = Te + 2 * mf * w(ph2) * Df
    Tmix_s = Te_s + 2 * mf * (w(ph2_s) * Df + w(ph2) * Df_s)
    FiT, FiT_s = _mT(Fi), _mT(Fi_s)
    P = w(J) * _mm(Tmix, FiT)
    P_s = w(J_s) * _mm(Tmix, FiT) + w(J) * (_mm(Tmix_s, FiT) + _mm(Tmix, FiT_s))
    Q = w(J) * _mm(Tfv, FiT)
    Q_s = w(J_s) * _mm(Tfv, FiT) + w(J) * (_mm(Tfv_s, FiT) + _mm(Tfv, FiT_s))

    # J F^{-1} v_va with v_va = v_s + phi_f W = v_s - beta pi (1, 1)
    v_va = v_s - beta * pi[:, None] * E
    v_va_s = v_s_s - beta * pi_s[:, None] * E
    flux = np.einsum("nij,nj->ni", _adj(F), v_va)
    flux_s = np.einsum("nij,nj->ni", _adj(F_s), v_va) + np.einsum("nij,nj->ni", _adj(F), v_va_s)

    return dict(
        F=F, J=J, Fi=Fi, phis=phiR / J, phif=phf, p=p, gradp=pi[:, None] * E,
        v_s=v_s, a_s=a_s, v_f=v_f, W=W, af=af, Tmix=Tmix, Tfv=Tfv,
        grad_u=F - I, grad_p_ref=(pi * J)[:, None] * E, grad_vs=gvs, grad_vf=gvf, dt_vf=v_f_t,
        div_P_mix=k * P_s.sum(-1), div_Q_fluid=k * Q_s.sum(-1), div_JFinv_vva=k * flux_s.sum(-1),
        P_mix=P, Q_fluid=Q, JFinv_vva=flux, mat=mat,
    )


def _volume_sources(ms, X, t, region):
    f = _pointwise(ms, X, t, region)
    m = f["mat"]
    J, phf = f["J"][:, None], f["phif"][:, None]
    rho_s, rho_f = m.rho_s_star * f["phis"][:, None], m.rho_f_star * phf
    drag = m.mu_D * phf**2 / m.kappa_s
    bs, bf = np.asarray(m.b_s, float), np.asarray(m.b_f, float)
    su = J * (rho_s * f["a_s"] + rho_f * f["af"] - bs - bf + f["gradp"]) - f["div_P_mix"]
    sf = J * (rho_f * f["af"] - bf + phf * f["gradp"] + drag * f["W"]) - f["div_Q_fluid"]
    return su, sf, f["div_JFinv_vva"]


def _interface_sources(ms, X, t, m_s, rp, rm):
    X = np.atleast_2d(np.asarray(X, float))
    m_s = np.broadcast_to(np.asarray(m_s, float), X.shape)
    fp, fm = _pointwise(ms, X, t, rp), _pointwise(ms, X, t, rm)
    N = fm["J"][:, None] * np.einsum("nji,nj->ni", fm["Fi"], m_s)
    Nabs = np.sqrt((N**2).sum(1))
    ip = ms.ip_o * ms._time(t)[0] * np.cos(np.pi / ms.L * (X[:, 0] + ms.eval_exact("u_s", X, t)[:, 0]))
    dot = lambda a, b: (a * b).sum(1)  # noqa: E731
    Wp, Wm = fp["W"], fm["W"]
    php, phm = fp["phif"], fm["phif"]
    jv = php[:, None] * Wp - phm[:, None] * Wm
    rfp, rfm = fp["mat"].rho_f_star * php, fm["mat"].rho_f_star * phm
    Pjump = np.einsum("nij,nj->ni", fp["P_mix"] - fm["P_mix"], m_s)
    su = ((rfp * dot(Wp, N))[:, None] * Wp - (rfm * dot(Wm, N))[:, None] * Wm
          + (fp["p"] - fm["p"])[:, None] * N - Pjump)
    fric = FRICTION_PREFACTOR * ms.interface.mu_S * Nabs

    def G(rf, v, W, ph, p):
        kf = 0.5 * rf * dot(v, v)
        return ((kf + ph * (ip - p))[:, None] * N - (rf * dot(W, N))[:, None] * v
                - (ph * fric)[:, None] * jv)

    Gp = G(rfp, fp["v_f"], Wp, php, fp["p"])
    Gm = G(rfm, fm["v_f"], Wm, phm, fm["p"])
    Qp = np.einsum("nij,nj->ni", fp["Q_fluid"], m_s)
    Qm = np.einsum("nij,nj->ni", fm["Q_fluid"], m_s)
    return su, -(Qp + Gp), Qm + Gm, dot(jv, N)


def _tractions(ms, X, t, n_s, region):
    X = np.atleast_2d(np.asarray(X, float))
    n_s = np.broadcast_to(np.asarray(n_s, float), X.shape)
    f = _pointwise(ms, X, t, region)
    N = f["J"][:, None] * np.einsum("nji,nj->ni", f["Fi"], n_s)
    p = f["p"][:, None]
    mix = np.einsum("nij,nj->ni", f["Tmix"], N) - p * N
    fluid = np.einsum("nij,nj->ni", f["Tfv"], N) - f["phif"][:, None] * p * N
    return mix, fluid


# ---------------------------------------------------------------------------
# problem wiring
# ---------------------------------------------------------------------------

class MMSForcing:
    """Adapter exposing manufactured sources to :class:`Problem`."""

    def __init__(self, ms: ManufacturedSolution):
        self.ms = ms

    def volume(self, X, t, region):
        return self.ms.source_terms(X, t, region)

    def interface(self, X, t, m_s, region_plus, region_minus):
        return self.ms.interface_sources(X, t, m_s, region_plus, region_minus)


def _by_region(fn):
    def value(X, t, regions):
        X = np.asarray(X, float).reshape(-1, 2)
        out = np.zeros((len(X), 2))
        regions = np.asarray(regions)
        for r in sorted(set(regions.tolist())):
            sel = regions == r
            out[sel] = fn(X[sel], t, r)
        return out
    return value


def mms_boundary_conditions(ms: ManufacturedSolution) -> BoundaryConditions:
    """Displacement prescribed everywhere, fluid velocity on the lateral
    sides and fluid traction on top and bottom, all from the exact fields."""
    u_val = _by_region(lambda X, t, r: ms.eval_exact("u_s", X, t, r))
    vf_val = _by_region(lambda X, t, r: ms.eval_exact("v_f", X, t, r))

    def traction(X, t, n_s, region):
        return ms.boundary_traction(X, t, n_s, region, "v_f")

    bc = BoundaryConditions()
    for tag in ("bottom", "top", "left", "right"):
        bc.dirichlet.append(Dirichlet(tag, "u_s", (0, 1), u_val))
    for tag in ("left", "right"):
        bc.dirichlet.append(Dirichlet(tag, "v_f", (0, 1), vf_val))
    for tag in ("bottom", "top"):
        bc.traction.append(Traction(tag, "v_f", traction))
    return bc


def mms_problem(mesh, ms: ManufacturedSolution | None = None) -> Problem:
    ms = ms or ManufacturedSolution()
    return Problem(mesh, ms.materials, ms.interface, mms_boundary_conditions(ms), MMSForcing(ms))


def interpolate_exact(problem: Problem, ms: ManufacturedSolution, t: float):
    """Nodal interpolant ``z`` of the exact fields and nodal ``v_s``."""
    dm = problem.dofmap
    z = np.zeros(dm.total_dofs)
    u, vf, p, ip = dm.split(z)
    X2 = dm.p2_coords
    u[:] = ms.eval_exact("u_s", X2, t)
    vs = ms.eval_exact("v_s", X2, t)
    for r in problem.mesh.region_names:
        sel = dm.vf_region == r
        vf[sel] = ms.eval_exact("v_f", X2[dm.vf_base[sel]], t, r)
        sel = dm.p_region == r
        p[sel] = ms.eval_exact("p", problem.mesh.nodes[dm.p_base[sel]], t, r)
    if len(ip):
        ip[:] = ms.eval_exact("ip", problem.mesh.nodes[dm.ip_vertices], t)
    return z, vs


def mms_initial_state(problem: Problem, ms: ManufacturedSolution, dt: float, t0: float = 0.0) -> State:
    """State at ``t0`` with one exact history level at ``t0 - dt``."""
    dm = problem.dofmap
    z, vs = interpolate_exact(problem, ms, t0)
    zh, vsh = interpolate_exact(problem, ms, t0 - dt)
    uh, vfh, _, _ = dm.split(zh)
    return State(t0, z, vs, (Snapshot(t0 - dt, uh.copy(), vsh, vfh.copy()),))


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

def error_norms(problem: Problem, z: np.ndarray, ms: ManufacturedSolution, t: float) -> dict:
    """Relative errors of a discrete solution against the exact fields.

    Integrals are taken over the exact deformed configuration (weight
    ``J``), region by region, so each field is compared on its own domain.
    Gradients are spatial: ``Grad_X(.) F^{-1}``.

    Returns
    -------
    dict
        ``{field: {'L2': rel, 'H1': rel, 'L2_abs': ..., 'H1_abs': ...}}``;
        ``ip`` has L2 entries only.  A zero exact norm yields the absolute
        value and ``'absolute': True``.
    """
    mesh, dm = problem.mesh, problem.dofmap
    quad = collapsed_triangle_rule(5)
    v2, g2 = p2_tri(quad.points)
    v1, g1 = p1_tri(quad.points)
    BinvT, area = affine_maps(mesh)
    u, vf, p, ip = dm.split(z)
    acc = {f: np.zeros(4) for f in ("u_s", "v_f", "p")}
    for r in mesh.region_names:
        el = np.nonzero(mesh.regions == r)[0]
        X = np.einsum("qa,kai->kqi", quad.points, mesh.nodes[mesh.triangles[el]])
        Xf = X.reshape(-1, 2)
        w = (2 * area[el, None] * quad.weights[None, :]).ravel()
        G2 = np.einsum("qaj,kij->kqai", g2, BinvT[el])
        G1 = np.einsum("qaj,kij->kqai", g1, BinvT[el])
        F = ms.eval_exact("F", Xf, t, r)
        Finv = np.linalg.inv(F)
        wJ = w * ms.eval_exact("J", Xf, t, r)
        gu_e, gvf_e, gp_e = ms.exact_gradients(Xf, t, r)
        nq = len(quad.weights)
        ue, vfe, pe = u[dm.elem_p2[el]], vf[dm.elem_vf[el]], p[dm.elem_p[el]]
        vals = {
            "u_s": (np.einsum("qa,kai->kqi", v2, ue), np.einsum("kai,kqaj->kqij", ue, G2),
                    ms.eval_exact("u_s", Xf, t, r), gu_e),
            "v_f": (np.einsum("qa,kai->kqi", v2, vfe), np.einsum("kai,kqaj->kqij", vfe, G2),
                    ms.eval_exact("v_f", Xf, t, r), gvf_e),
            "p": (np.einsum("qa,ka->kq", v1, pe), np.einsum("ka,kqaj->kqj", pe, G1),
                  ms.eval_exact("p", Xf, t, r), gp_e),
        }
        for f, (vh, gh, ve, ge) in vals.items():
            vh = vh.reshape(len(Xf), -1)
            ve = ve.reshape(len(Xf), -1)
            gh = gh.reshape(len(Xf), -1, 2)
            ge = ge.reshape(len(Xf), -1, 2)
            de = np.einsum("nij,njk->nik", gh - ge, Finv)
            ex = np.einsum("nij,njk->nik", ge, Finv)
            acc[f] += [np.sum(wJ * ((vh - ve) ** 2).sum(1)), np.sum(wJ * (ve**2).sum(1)),
                       np.sum(wJ * (de**2).sum((1, 2))), np.sum(wJ * (ex**2).sum((1, 2)))]
        del nq
    out = {}
    for f, (e0, n0, e1, n1) in acc.items():
        out[f] = _rel(np.sqrt(e0), np.sqrt(n0), "L2")
        out[f].update(_rel(np.sqrt(e1), np.sqrt(n1), "H1"))
    if mesh.n_facets:
        seg = segment_rule(5)
        fc = mesh.facets
        tm = mesh.facet_minus
        lam = edge_barycentric(mesh.triangles[tm], fc[:, 0], fc[:, 1], seg.points)
        X = np.einsum("kqa,kai->kqi", lam, mesh.nodes[mesh.triangles[tm]]).reshape(-1, 2)
        w = (mesh.facet_lengths()[:, None] * seg.weights[None, :]).ravel()
        F = ms.eval_exact("F", X, t, "A")
        J = ms.eval_exact("J", X, t, "A")
        m = np.repeat(mesh.facet_normals, len(seg.weights), axis=0)
        N = J[:, None] * np.einsum("nji,nj->ni", np.linalg.inv(F), m)
        wN = w * np.sqrt((N**2).sum(1))
        iph = ((1 - seg.points)[None, :] * ip[dm.facet_ip[:, 0], None]
               + seg.points[None, :] * ip[dm.facet_ip[:, 1], None]).ravel()
        ipe = ms.eval_exact("ip", X, t)
        out["ip"] = _rel(np.sqrt(np.sum(wN * (iph - ipe) ** 2)), np.sqrt(np.sum(wN * ipe**2)), "L2")
    return out


def _rel(err, ref, key):
    if ref > 0:
        return {key: float(err / ref), f"{key}_abs": float(err)}
    return {key: float(err), f"{key}_abs": float(err), "absolute": True}


def convergence_rates(errors) -> list:
    """Observed orders ``log(e_k / e_k+1) / log(h_k / h_k+1)``.

    Parameters
    ----------
    errors : sequence of ``(h, e)``
        At least two levels with strictly decreasing ``h``.
    """
    errors = [(float(h), float(e)) for h, e in errors]
    if len(errors) < 2:
        raise ValueError("at least two levels are required")
    for (h0, e0), (h1, e1) in zip(errors, errors[1:]):
        if not h1 < h0:
            raise ValueError("mesh sizes must decrease strictly")
    if any(e <= 0 for _, e in errors):
        raise ValueError("errors must be positive")
    return [float(np.log(e0 / e1) / np.log(h0 / h1)) for (h0, e0), (h1, e1) in zip(errors, errors[1:])]
