"""Residual and Jacobian of the time-discrete mixture problem.

All quantities live on the reference configuration.  The unknowns are the
solid displacement ``u_s`` (continuous P2), the fluid velocity ``v_f`` (P2,
two-sided on the interface), the pore pressure ``p`` (P1, two-sided) and the
interface multiplier ``ip`` (P1 on interface vertices).

Residual rows, per unit thickness and with the unit time constant folded in:

* mixture momentum, tested with the solid displacement test function;
* fluid momentum, tested with the fluid velocity test function;
* mass (volume-averaged velocity divergence), tested with P1 pressures;
* normal filtration flux continuity, tested with interface P1 functions.

Interface integrals use the area vector ``N = J F^{-T} m_s`` from the
minus-side trace of ``F``.  Jumps are plus minus minus.

Element Jacobians are obtained by forward-mode automatic differentiation of
the local residual kernels with jax (``mode="exact"``) or by forward
differences (``mode="finite-difference"``).  The kernels are written against
an array module argument so the same code runs under numpy and jax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .constitutive import (
    PHI_BOUNDS,
    InterfaceParams,
    MaterialParams,
    StateValidityError,
)
from .mesh import Mesh
from .spaces import (
    P2_EDGES,
    DofMap,
    affine_maps,
    build_dofmap,
    edge_barycentric,
    p1_tri,
    p2_tri,
    segment_rule,
    triangle_rule,
)

__all__ = [
    "Snapshot",
    "State",
    "Dirichlet",
    "Traction",
    "Impermeable",
    "Pin",
    "BoundaryConditions",
    "Forcing",
    "Problem",
    "StepData",
    "bdf_coefficients",
    "bdf_rates",
    "ale_fluid_acceleration",
    "FRICTION_PREFACTOR",
    "JACOBIAN_MODES",
]

# prefactor of the interface friction term, as it appears in the weak form
FRICTION_PREFACTOR = 0.5

JACOBIAN_MODES = ("exact", "finite-difference")

# ---------------------------------------------------------------------------
# time discretization
# ---------------------------------------------------------------------------

def bdf_coefficients(order: int) -> tuple[float, float, float]:
    """Coefficients ``(c0, c1, c2)`` with ``dy = (c0 y_n + c1 y_n-1 + c2 y_n-2) / dt``."""
    if order == 1:
        return 1.0, -1.0, 0.0
    if order == 2:
        return 1.5, -2.0, 0.5
    raise ValueError(f"BDF order must be 1 or 2, got {order!r}")


def _bdf(y, hist, dt, order):
    c = bdf_coefficients(order)
    if len(hist) < order:
        raise ValueError(f"BDF{order} needs {order} history entries, got {len(hist)}")
    out = c[0] * np.asarray(y)
    for k in range(order):
        out = out + c[k + 1] * np.asarray(hist[k])
    return out / dt


def bdf_rates(current, history, dt: float, order: int):
    """BDF rates of the solid displacement and fluid velocity.

    Parameters
    ----------
    current : tuple ``(u, v_f)``
    history : sequence of ``(u, v_s, v_f)``, newest first
    dt : float
    order : {1, 2}

    Returns
    -------
    v_s, a_s, dvf
        ``v_s`` is the rate of ``u``; ``a_s`` the rate of the ``v_s``
        sequence (history ``v_s`` values are used for the earlier levels);
        ``dvf`` the rate of ``v_f``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u, vf = current
    if len(history) < order:
        raise ValueError(f"BDF{order} needs {order} history entries, got {len(history)}")
    vs = _bdf(u, [h[0] for h in history], dt, order)
    a_s = _bdf(vs, [h[1] for h in history], dt, order)
    dvf = _bdf(vf, [h[2] for h in history], dt, order)
    return vs, a_s, dvf


def ale_fluid_acceleration(dvf, grad_vf, F_inv, v_f, v_s):
    """Fluid acceleration ``dvf + (Grad v_f F^{-1}) (v_f - v_s)`` at points."""
    L = np.einsum("...ij,...jk->...ik", grad_vf, F_inv)
    return np.asarray(dvf) + np.einsum("...ij,...j->...i", L, np.asarray(v_f) - np.asarray(v_s))


# ---------------------------------------------------------------------------
# state and boundary data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    """Stored time level: nodal ``u`` and ``v_s`` (P2 layout) and ``v_f``."""

    t: float
    u: np.ndarray
    vs: np.ndarray
    vf: np.ndarray


@dataclass(frozen=True)
class State:
    """Solution at time ``t`` plus the previous time level.

    Attributes
    ----------
    t : float
    z : ndarray
        Coefficients ``[u_s | v_f | p | ip]``.
    vs : (n_p2, 2) ndarray
        Nodal solid velocity at ``t``.
    history : tuple of Snapshot
        Earlier levels, newest first (at most one is kept).
    """

    t: float
    z: np.ndarray
    vs: np.ndarray
    history: tuple = ()

    def snapshot(self, dofmap: DofMap) -> Snapshot:
        u, vf, _, _ = dofmap.split(self.z)
        return Snapshot(self.t, u.copy(), np.array(self.vs, copy=True), vf.copy())

    def bdf_history(self, dofmap: DofMap) -> tuple:
        """History to use for the step that starts from this state."""
        return (self.snapshot(dofmap),) + tuple(self.history[:1])


ValueFn = Callable[..., np.ndarray]


@dataclass(frozen=True)
class Dirichlet:
    """Prescribed nodal values of ``u_s`` or ``v_f`` on a boundary tag.

    ``value(X, t, regions)`` returns ``(n, 2)`` values at node coordinates;
    ``None`` means zero.
    """

    tag: str
    field: str
    components: tuple = (0, 1)
    value: ValueFn | None = None


@dataclass(frozen=True)
class Traction:
    """Prescribed traction on a boundary tag.

    For ``field="u_s"`` the data is the total mixture traction, for
    ``field="v_f"`` the total fluid traction.  ``value(X, t, n_s, region)``
    returns ``(n, 2)`` force per unit *reference* length; ``None`` means a
    traction-free boundary.  Edges without any condition are traction-free
    as well.
    """

    tag: str
    field: str
    value: ValueFn | None = None


@dataclass(frozen=True)
class Impermeable:
    """Zero normal filtration: ``v_f . n = (rate of u_s) . n`` on a tag."""

    tag: str


@dataclass(frozen=True)
class Pin:
    """Single-component constraint at the node closest to ``point``."""

    field: str
    point: tuple
    component: int = 0
    value: float = 0.0


@dataclass
class BoundaryConditions:
    dirichlet: list = field(default_factory=list)
    traction: list = field(default_factory=list)
    impermeable: list = field(default_factory=list)
    pins: list = field(default_factory=list)

    def tags(self) -> set:
        return ({d.tag for d in self.dirichlet} | {t.tag for t in self.traction}
                | {i.tag for i in self.impermeable})


class Forcing(Protocol):
    """Source terms per unit reference measure."""

    def volume(self, X: np.ndarray, t: float, region: str):
        """Return ``(s_u, s_f, s_p)`` at points ``X (n, 2)``."""

    def interface(self, X: np.ndarray, t: float, m_s: np.ndarray, region_plus: str,
                  region_minus: str):
        """Return ``(s_u, s_f_plus, s_f_minus, s_ip)`` at interface points."""


# ---------------------------------------------------------------------------
# pointwise evaluation shared by all kernels
# ---------------------------------------------------------------------------

@dataclass
class _Geo:
    """Shape data of a batch of triangles evaluated at some points."""

    elem: np.ndarray     # (K,)
    N2: np.ndarray       # (K, q, 6)
    G2: np.ndarray       # (K, q, 6, 2) referential gradients
    N1: np.ndarray       # (K, q, 3)
    G1: np.ndarray       # (K, q, 3, 2)
    w: np.ndarray        # (K, q) quadrature weight times measure
    X: np.ndarray        # (K, q, 2)


def _geo(mesh: Mesh, elem: np.ndarray, lam: np.ndarray, w: np.ndarray) -> _Geo:
    """Shape data at barycentric points ``lam (K, q, 3)``."""
    K, q = lam.shape[:2]
    flat = lam.reshape(-1, 3)
    v2, g2 = p2_tri(flat)
    v1, g1 = p1_tri(flat)
    BinvT, _ = affine_maps(mesh, elem)
    G2 = np.einsum("kqaj,kij->kqai", g2.reshape(K, q, 6, 2), BinvT)
    G1 = np.einsum("kqaj,kij->kqai", g1.reshape(K, q, 3, 2), BinvT)
    X = np.einsum("kqa,kai->kqi", lam, mesh.nodes[mesh.triangles[elem]])
    return _Geo(elem, v2.reshape(K, q, 6), G2, v1.reshape(K, q, 3), G1, w, X)


def _geo_dict(g: _Geo) -> dict:
    return dict(N2=g.N2, G2=g.G2, N1=g.N1, G1=g.G1, w=g.w)


@dataclass
class _Mat:
    """Material constants gathered per item (K,)."""

    rs: np.ndarray
    rf: np.ndarray
    phiR: np.ndarray
    kap: np.ndarray
    muD: np.ndarray
    mBb: np.ndarray
    mfb: np.ndarray
    muRe: np.ndarray
    bs: np.ndarray
    bf: np.ndarray

    @classmethod
    def gather(cls, materials: dict, regions: Sequence[str]) -> "_Mat":
        mats = [materials[r] for r in regions]
        g = lambda name: np.array([getattr(m, name) for m in mats], float)  # noqa: E731
        return cls(g("rho_s_star"), g("rho_f_star"), g("phi_Rs"), g("kappa_s"), g("mu_D"),
                   g("mu_B_bar"), g("mu_f_bar"), g("mu_Re"),
                   np.array([m.b_s for m in mats], float).reshape(-1, 2),
                   np.array([m.b_f for m in mats], float).reshape(-1, 2))

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in ("rs", "rf", "phiR", "kap", "muD", "mBb", "mfb",
                                              "muRe", "bs", "bf")}


def _det(A):
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def _inv(xp, A, d):
    r0 = xp.stack([A[..., 1, 1], -A[..., 0, 1]], -1)
    r1 = xp.stack([-A[..., 1, 0], A[..., 0, 0]], -1)
    return xp.stack([r0, r1], -2) / d[..., None, None]


def _tr(A):
    return A[..., 0, 0] + A[..., 1, 1]


def _check_state(J, phis, elem):
    """Raise :class:`StateValidityError` naming the first bad point."""
    ps = np.asarray(phis)
    bad = ~((ps > PHI_BOUNDS[0]) & (ps < PHI_BOUNDS[1])) | ~(np.asarray(J) > 0)
    if np.any(bad):
        k, qq = np.unravel_index(int(np.argmax(bad)), bad.shape)
        raise StateValidityError(
            f"invalid kinematics in element {int(elem[k])} at quadrature point {qq}: "
            f"J = {float(np.asarray(J)[k, qq]):.6g}, phi_s = {float(ps[k, qq]):.6g}")


def _rates(zl, hist, sc):
    K = zl.shape[0]
    u = zl[:, :12].reshape(K, 6, 2)
    vf = zl[:, 12:24].reshape(K, 6, 2)
    p = zl[:, 24:27]
    hu, hvs, hvf = hist
    dt, c0 = sc["dt"], sc["c0"]
    vs_n = (c0 * u + hu) / dt
    as_n = (c0 * vs_n + hvs) / dt
    dvf_n = (c0 * vf + hvf) / dt
    return u, vf, p, vs_n, as_n, dvf_n


def _point_fields(xp, geo, mat, zl, hist, sc, elem=None):
    """Quantities at the points of ``geo`` from local coefficients ``zl (K, 27)``.

    ``elem`` enables the admissibility check (numpy evaluation only).
    """
    u, vf, p, vs_n, as_n, dvf_n = _rates(zl, hist, sc)
    N2, G2, N1, G1 = geo["N2"], geo["G2"], geo["N1"], geo["G1"]
    F = xp.einsum("kai,kqaj->kqij", u, G2) + xp.eye(2)
    J = _det(F)
    Finv = _inv(xp, F, J)
    phis = mat["phiR"][:, None] / J
    if elem is not None:
        _check_state(J, phis, elem)
    out = dict(F=F, J=J, Finv=Finv, phis=phis, phif=1.0 - phis)
    out["vs"] = xp.einsum("kqa,kai->kqi", N2, vs_n)
    out["as"] = xp.einsum("kqa,kai->kqi", N2, as_n)
    out["vf"] = xp.einsum("kqa,kai->kqi", N2, vf)
    out["dvf"] = xp.einsum("kqa,kai->kqi", N2, dvf_n)
    out["p"] = xp.einsum("kqa,ka->kq", N1, p)
    out["gvs"] = xp.einsum("kai,kqaj->kqij", vs_n, G2)
    out["gvf"] = xp.einsum("kai,kqaj->kqij", vf, G2)
    out["gp"] = xp.einsum("ka,kqaj->kqj", p, G1)
    return out


def _stresses(xp, f, mat):
    """Velocity gradients, accelerations and stresses at points."""
    Finv, F, J = f["Finv"], f["F"], f["J"]
    Ls = xp.einsum("kqij,kqjl->kqil", f["gvs"], Finv)
    Lf = xp.einsum("kqij,kqjl->kqil", f["gvf"], Finv)
    Ds = 0.5 * (Ls + xp.swapaxes(Ls, -1, -2))
    Df = 0.5 * (Lf + xp.swapaxes(Lf, -1, -2))
    W = f["vf"] - f["vs"]
    af = f["dvf"] + xp.einsum("kqij,kqj->kqi", Lf, W)
    phif2 = f["phif"] ** 2
    muB = mat["mBb"][:, None] * phif2
    muf = mat["mfb"][:, None] * phif2
    # neo-Hookean Cauchy stress, in-plane block (out-of-plane stretch 1)
    B = xp.einsum("kqil,kqjl->kqij", F, F)
    coef = mat["phiR"][:, None] * mat["muRe"][:, None] * J ** (-5.0 / 3.0)
    Te = coef[..., None, None] * (B - ((_tr(B) + 1.0) / 3.0)[..., None, None] * xp.eye(2))
    Tfv = 2 * muf[..., None, None] * Df + 2 * muB[..., None, None] * (Df - Ds)
    Tmix = Te + 2 * muf[..., None, None] * Df
    gradp = xp.einsum("kqji,kqj->kqi", Finv, f["gp"])
    return dict(Ls=Ls, Lf=Lf, Ds=Ds, Df=Df, W=W, af=af, Te=Te, Tfv=Tfv, Tmix=Tmix, gradp=gradp,
                muB=muB, muf=muf)


def _nanson(xp, F, J, Finv, m):
    """``N = J F^{-T} m`` for ``m (K, 2)``."""
    return J[..., None] * xp.einsum("kqji,kj->kqi", Finv, m)


def _dot(xp, a, b):
    return xp.einsum("...i,...i->...", a, b)


def volume_kernel(xp, zl, hist, sc, geo, mat, extra, elem=None):
    """Local mixture momentum, fluid momentum and mass rows ``(K, 27)``."""
    f = _point_fields(xp, geo, mat, zl, hist, sc, elem)
    s = _stresses(xp, f, mat)
    J, phif = f["J"], f["phif"]
    FinvT = xp.swapaxes(f["Finv"], -1, -2)
    rho_s = mat["rs"][:, None] * f["phis"]
    rho_f = mat["rf"][:, None] * phif
    drag = mat["muD"][:, None] * phif**2 / mat["kap"][:, None]
    b = (mat["bs"] + mat["bf"])[:, None, :]
    fm = J[..., None] * (rho_s[..., None] * f["as"] + rho_f[..., None] * s["af"] - b + s["gradp"])
    ff = J[..., None] * (rho_f[..., None] * s["af"] - mat["bf"][:, None, :]
                         + phif[..., None] * s["gradp"] + drag[..., None] * s["W"])
    Pm = J[..., None, None] * xp.einsum("kqij,kqjl->kqil", s["Tmix"], FinvT)
    Pf = J[..., None, None] * xp.einsum("kqij,kqjl->kqil", s["Tfv"], FinvT)
    w, N2, G2 = geo["w"], geo["N2"], geo["G2"]
    ru = xp.einsum("kq,kqa,kqi->kai", w, N2, fm) + xp.einsum("kq,kqij,kqaj->kai", w, Pm, G2)
    rv = xp.einsum("kq,kqa,kqi->kai", w, N2, ff) + xp.einsum("kq,kqij,kqaj->kai", w, Pf, G2)
    vva = f["vs"] + phif[..., None] * s["W"]
    # J v_va . F^{-T} grad psi
    flux = J[..., None] * xp.einsum("kqij,kqj->kqi", f["Finv"], vva)
    rp = -xp.einsum("kq,kqi,kqai->ka", w, flux, geo["G1"])
    K = zl.shape[0]
    return xp.concatenate([ru.reshape(K, 12), rv.reshape(K, 12), rp], axis=1)


def boundary_kernel(xp, zl, hist, sc, geo, mat, extra, elem=None):
    """Boundary mass flux and boundary pressure terms ``(K, 27)``.

    The pressure terms are kept on every boundary edge; rows with
    prescribed values are overwritten afterwards.
    """
    f = _point_fields(xp, geo, mat, zl, hist, sc, elem)
    N = _nanson(xp, f["F"], f["J"], f["Finv"], extra["normal"])
    phif = f["phif"]
    vva = f["vs"] + phif[..., None] * (f["vf"] - f["vs"])
    w = geo["w"]
    rp = xp.einsum("kq,kqa,kq->ka", w, geo["N1"], _dot(xp, vva, N))
    pN = f["p"][..., None] * N
    ru = -xp.einsum("kq,kqa,kqi->kai", w, geo["N2"], pN)
    rv = -xp.einsum("kq,kqa,kqi->kai", w, geo["N2"], phif[..., None] * pN)
    K = zl.shape[0]
    return xp.concatenate([ru.reshape(K, 12), rv.reshape(K, 12), rp], axis=1)


def facet_kernel(xp, zl, hist, sc, geo, mat, extra, elem=None):
    """Interface rows ``(K, 56)``: plus element, minus element, multiplier.

    ``geo``, ``mat`` and ``hist`` are pairs ``(plus, minus)``; ``elem`` is
    a pair of element index arrays when checking.
    """
    (gp, gm), (mp, mm) = geo, mat
    hp, hm = hist
    ep, em = (None, None) if elem is None else elem
    fp = _point_fields(xp, gp, mp, zl[:, :27], hp, sc, ep)
    fm = _point_fields(xp, gm, mm, zl[:, 27:54], hm, sc, em)
    Nip = sc["Nip"]
    N = _nanson(xp, fm["F"], fm["J"], fm["Finv"], extra["normal"])
    Nabs = xp.sqrt(_dot(xp, N, N))
    vs = fm["vs"]
    ip = xp.einsum("qa,ka->kq", Nip, zl[:, 54:56])
    Wp, Wm = fp["vf"] - vs, fm["vf"] - vs
    php, phm = fp["phif"], fm["phif"]
    vfltp, vfltm = php[..., None] * Wp, phm[..., None] * Wm
    jv = vfltp - vfltm
    rfp, rfm = mp["rf"][:, None] * php, mm["rf"][:, None] * phm
    WNp, WNm = _dot(xp, Wp, N), _dot(xp, Wm, N)
    tu = ((rfp * WNp)[..., None] * Wp - (rfm * WNm)[..., None] * Wm
          + (fp["p"] - fm["p"])[..., None] * N)
    fric = FRICTION_PREFACTOR * sc["mu_S"] * Nabs

    def G(rf_, vf_, WN, ph, p_):
        kf = 0.5 * rf_ * _dot(xp, vf_, vf_)
        return ((kf + ph * (ip - p_))[..., None] * N - (rf_ * WN)[..., None] * vf_
                - (ph * fric)[..., None] * jv)

    Gp = G(rfp, fp["vf"], WNp, php, fp["p"])
    Gm = G(rfm, fm["vf"], WNm, phm, fm["p"])
    w = gm["w"]
    K = zl.shape[0]
    ru_m = xp.einsum("kq,kqa,kqi->kai", w, gm["N2"], tu).reshape(K, 12)
    rv_p = -xp.einsum("kq,kqa,kqi->kai", w, gp["N2"], Gp).reshape(K, 12)
    rv_m = xp.einsum("kq,kqa,kqi->kai", w, gm["N2"], Gm).reshape(K, 12)
    rp_p = -xp.einsum("kq,kqa,kq->ka", w, gp["N1"], _dot(xp, vs + vfltp, N))
    rp_m = xp.einsum("kq,kqa,kq->ka", w, gm["N1"], _dot(xp, vs + vfltm, N))
    rip = xp.einsum("kq,qa,kq->ka", w, Nip, _dot(xp, jv, N))
    z12 = xp.zeros_like(ru_m)
    return xp.concatenate([z12, rv_p, rp_p, ru_m, rv_m, rp_m, rip], axis=1)


_KERNELS = {"volume": volume_kernel, "boundary": boundary_kernel, "facet": facet_kernel}
_CHUNKS = {"volume": 2048, "boundary": 512, "facet": 256}


def _tree_take(tree, idx):
    if isinstance(tree, dict):
        return {k: _tree_take(v, idx) for k, v in tree.items()}
    if isinstance(tree, (tuple, list)):
        return type(tree)(_tree_take(v, idx) for v in tree)
    return tree[idx]


_JAX_JAC: dict = {}


def _jax_local_jacobian(name):
    """Compiled ``(zl, hist, sc, geo, mat, extra) -> (K, m, m)`` for one kernel."""
    if name not in _JAX_JAC:
        import jax
        import jax.numpy as jnp

        jax.config.update("jax_enable_x64", True)
        kern = _KERNELS[name]

        def single(zl, hist, sc, geo, mat, extra):
            one = lambda t: jax.tree_util.tree_map(lambda a: a[None], t)  # noqa: E731
            return kern(jnp, zl[None], one(hist), sc, one(geo), one(mat), one(extra))[0]

        jac = jax.jacfwd(single)
        _JAX_JAC[name] = jax.jit(jax.vmap(jac, in_axes=(0, 0, None, 0, 0, 0)))
    return _JAX_JAC[name]


def _chunked_jacobian(name, zl, args):
    """Element Jacobians by forward-mode AD in fixed-size chunks.

    Padding every call to the same chunk length keeps one compiled
    function per kernel type, independent of the mesh.
    """
    fn = _jax_local_jacobian(name)
    hist, sc, geo, mat, extra = args
    K, m = zl.shape
    C = _CHUNKS[name]
    out = np.empty((K, m, m))
    for a in range(0, K, C):
        idx = np.arange(a, a + C)
        idx[idx >= K] = a
        res = fn(zl[idx], _tree_take(hist, idx), sc, _tree_take(geo, idx), _tree_take(mat, idx),
                 _tree_take(extra, idx))
        n = min(C, K - a)
        out[a:a + n] = np.asarray(res)[:n]
    return out


# ---------------------------------------------------------------------------
# the discrete problem
# ---------------------------------------------------------------------------

@dataclass
class StepData:
    """Data frozen during one time step."""

    t: float
    dt: float
    order: int
    c0: float
    hu: np.ndarray      # history part of the u_s rate, P2 layout
    hvs: np.ndarray     # history part of the v_s rate
    hvf: np.ndarray     # history part of the v_f rate
    load: np.ndarray    # assembled sources and traction data
    dir_vals: np.ndarray  # prescribed values of the constrained rows (NaN for linear constraints)


class Problem:
    """Spatially discrete mixture problem on a mesh.

    Parameters
    ----------
    mesh : Mesh
    materials : dict
        Region tag to :class:`MaterialParams`.
    interface : InterfaceParams
    bcs : BoundaryConditions
    forcing : Forcing, optional
        Manufactured source terms.
    """

    def __init__(self, mesh: Mesh, materials: dict, interface: InterfaceParams | None = None,
                 bcs: BoundaryConditions | None = None, forcing: Forcing | None = None):
        missing = set(mesh.region_names) - set(materials)
        if missing:
            raise KeyError(f"no material parameters for region(s) {sorted(missing)}")
        for r, m in materials.items():
            if not isinstance(m, MaterialParams):
                raise TypeError(f"materials[{r!r}] is not a MaterialParams")
        self.mesh = mesh
        self.materials = dict(materials)
        self.interface = interface or InterfaceParams()
        self.bcs = bcs or BoundaryConditions()
        self.forcing = forcing
        self.dofmap = build_dofmap(mesh)
        unknown = self.bcs.tags() - set(mesh.boundary_names)
        if unknown:
            raise KeyError(f"boundary tag(s) {sorted(unknown)} not present in the mesh")
        self._setup_volume()
        self._setup_boundary()
        self._setup_facets()
        self._setup_constraints()
        self._setup_pattern()
        self._row_scale_cache: dict = {}

    # -- setup -------------------------------------------------------------

    def _setup_volume(self):
        mesh = self.mesh
        quad = triangle_rule()
        E = mesh.n_triangles
        lam = np.broadcast_to(quad.points, (E,) + quad.points.shape)
        _, area = affine_maps(mesh)
        w = 2.0 * area[:, None] * quad.weights[None, :]
        elem = np.arange(E)
        self.vgeo = _geo(mesh, elem, lam, w)
        self.vmat = _Mat.gather(self.materials, mesh.regions)
        self._vgeo_d, self._vmat_d = _geo_dict(self.vgeo), self.vmat.as_dict()

    def _setup_boundary(self):
        mesh, dm = self.mesh, self.dofmap
        seg = segment_rule()
        be = mesh.boundary_edges
        # owning triangle of each boundary edge
        loc = np.stack([mesh.triangles[:, list(e)] for e in P2_EDGES], axis=1)
        owner = {}
        for t, row in enumerate(np.sort(loc, axis=2).tolist()):
            for e in row:
                owner[tuple(e)] = t
        elem = np.array([owner[tuple(sorted(e))] for e in be.tolist()], np.int64).reshape(-1)
        lam = edge_barycentric(mesh.triangles[elem], be[:, 0], be[:, 1], seg.points)
        d = mesh.nodes[be[:, 1]] - mesh.nodes[be[:, 0]]
        length = np.sqrt((d**2).sum(-1))
        ns = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
        cen = mesh.centroids()[elem]
        mid = 0.5 * (mesh.nodes[be[:, 0]] + mesh.nodes[be[:, 1]])
        ns[((mid - cen) * ns).sum(-1) < 0] *= -1.0
        self.bgeo = _geo(mesh, elem, lam, length[:, None] * seg.weights[None, :])
        self.bmat = _Mat.gather(self.materials, mesh.regions[elem])
        self._bgeo_d, self._bmat_d = _geo_dict(self.bgeo), self.bmat.as_dict()
        self.b_normal = ns
        for tr in self.bcs.traction:
            if tr.field not in ("u_s", "v_f"):
                raise ValueError(f"traction on unsupported field {tr.field!r}")
        self.bdofs = dm.elem_dofs[elem]

    def _setup_facets(self):
        mesh, dm = self.mesh, self.dofmap
        seg = segment_rule()
        Fn = mesh.n_facets
        fc = mesh.facets
        self.fseg = seg
        if Fn == 0:
            self.fgeo_p = self.fgeo_m = None
            self.f_Nip = np.zeros((len(seg.weights), 2))
            self.fdofs = np.zeros((0, 56), np.int64)
            return
        tp, tm = mesh.facet_plus, mesh.facet_minus
        length = mesh.facet_lengths()
        w = length[:, None] * seg.weights[None, :]
        lp = edge_barycentric(mesh.triangles[tp], fc[:, 0], fc[:, 1], seg.points)
        lm = edge_barycentric(mesh.triangles[tm], fc[:, 0], fc[:, 1], seg.points)
        self.fgeo_p = _geo(mesh, tp, lp, w)
        self.fgeo_m = _geo(mesh, tm, lm, w)
        self.fmat_p = _Mat.gather(self.materials, mesh.regions[tp])
        self.fmat_m = _Mat.gather(self.materials, mesh.regions[tm])
        self._fgeo_d = (_geo_dict(self.fgeo_p), _geo_dict(self.fgeo_m))
        self._fmat_d = (self.fmat_p.as_dict(), self.fmat_m.as_dict())
        self.f_normal = mesh.facet_normals.copy()
        self.f_Nip = np.stack([1 - seg.points, seg.points], axis=1)  # (q, 2)
        self.fdofs = np.hstack([dm.elem_dofs[tp], dm.elem_dofs[tm], dm.ip_dofs(dm.facet_ip)])

    def _setup_constraints(self):
        dm, mesh = self.dofmap, self.mesh
        rows, kinds, info = [], [], []
        taken = set()

        def add(row, kind, data):
            if row in taken:
                return
            taken.add(row)
            rows.append(row)
            kinds.append(kind)
            info.append(data)

        for d in self.bcs.dirichlet:
            nodes = dm.boundary_p2_nodes(d.tag)
            for c in d.components:
                if c not in (0, 1):
                    raise ValueError("Dirichlet components must be 0 or 1")
            if d.field == "u_s":
                for nd in nodes.tolist():
                    for c in d.components:
                        add(int(dm.u_dofs(nd, c)), "dir", (d, "u_s", nd, c))
            elif d.field == "v_f":
                for vn in dm.vf_copies(nodes).tolist():
                    for c in d.components:
                        add(int(dm.vf_dofs(vn, c)), "dir", (d, "v_f", vn, c))
            else:
                raise ValueError(f"Dirichlet data on unsupported field {d.field!r}")
        for pin in self.bcs.pins:
            X = np.asarray(pin.point, float)
            if pin.field == "u_s":
                nd = int(np.argmin(((dm.p2_coords - X) ** 2).sum(-1)))
                add(int(dm.u_dofs(nd, pin.component)), "pin", (pin,))
            elif pin.field == "v_f":
                nd = int(np.argmin(((dm.p2_coords[dm.vf_base] - X) ** 2).sum(-1)))
                add(int(dm.vf_dofs(nd, pin.component)), "pin", (pin,))
            elif pin.field == "p":
                nd = int(np.argmin(((mesh.nodes[dm.p_base] - X) ** 2).sum(-1)))
                add(int(dm.p_dofs(nd)), "pin", (pin,))
            else:
                raise ValueError(f"cannot pin field {pin.field!r}")
        # impermeable walls: one linear row per v_f node
        for imp in self.bcs.impermeable:
            sel = mesh.boundary_tags == imp.tag
            nodes = dm.boundary_p2_nodes(imp.tag)
            nsum = np.zeros((dm.n_p2, 2))
            for k in np.nonzero(sel)[0].tolist():
                i, j = mesh.boundary_edges[k]
                key = tuple(sorted((int(i), int(j))))
                mid = mesh.n_nodes + int(np.nonzero((dm.edges == key).all(1))[0][0])
                for nd in (i, j, mid):
                    nsum[nd] += self.b_normal[k]
            for vn in dm.vf_copies(nodes).tolist():
                base = int(dm.vf_base[vn])
                n = nsum[base] / np.linalg.norm(nsum[base])
                order = np.argsort(-np.abs(n), kind="stable")
                for c in order.tolist():
                    row = int(dm.vf_dofs(vn, c))
                    if row not in taken:
                        add(row, "imp", (vn, base, n))
                        break
        self.c_rows = np.array(rows, np.int64)
        self.c_kind = kinds
        self.c_info = info
        free = np.ones(dm.total_dofs, bool)
        free[self.c_rows] = False
        self.free_rows = free
        imp = [i for i, k in zip(info, kinds) if k == "imp"]
        self._imp_vn = np.array([i[0] for i in imp], np.int64)
        self._imp_base = np.array([i[1] for i in imp], np.int64)
        self._imp_n = np.array([i[2] for i in imp], float).reshape(-1, 2)

    def _setup_pattern(self):
        n = self.dofmap.total_dofs
        blocks = [self.dofmap.elem_dofs, self.bdofs, self.fdofs]
        rr, cc = [], []
        for d in blocks:
            if len(d) == 0:
                continue
            k = d.shape[1]
            rr.append(np.repeat(d, k, axis=1).ravel())
            cc.append(np.tile(d, (1, k)).ravel())
        # constraint columns
        imp = [(r, i) for r, kd, i in zip(self.c_rows.tolist(), self.c_kind, self.c_info) if kd == "imp"]
        extra_r, extra_c = [], []
        for r, (vn, base, nrm) in imp:
            for c in range(2):
                extra_r += [r, r]
                extra_c += [int(self.dofmap.vf_dofs(vn, c)), int(self.dofmap.u_dofs(base, c))]
        rr.append(np.array(extra_r + self.c_rows.tolist(), np.int64))
        cc.append(np.array(extra_c + self.c_rows.tolist(), np.int64))
        rows = np.concatenate(rr)
        cols = np.concatenate(cc)
        code = rows * n + cols
        uniq, inv = np.unique(code, return_inverse=True)
        self._pat_inv = inv.ravel()
        self._n_local = [len(x) for x in rr]
        r_u = uniq // n
        c_u = uniq % n
        indptr = np.zeros(n + 1, np.int64)
        np.add.at(indptr, r_u + 1, 1)
        self._indptr = np.cumsum(indptr)
        self._indices = c_u.astype(np.int32 if n < 2**31 else np.int64)
        self._nnz = len(uniq)
        # positions used to rewrite constrained rows
        pos_rows = [np.arange(self._indptr[r], self._indptr[r + 1]) for r in self.c_rows.tolist()]
        self._c_row_pos = np.concatenate(pos_rows) if pos_rows else np.zeros(0, np.int64)

        def find(r, c):
            a, b = self._indptr[r], self._indptr[r + 1]
            k = np.searchsorted(self._indices[a:b], c)
            return int(a + k)

        self._c_diag_pos = np.array([find(r, r) for r in self.c_rows.tolist()], np.int64)
        self._imp_pos = []
        for r, (vn, base, nrm) in imp:
            for c in range(2):
                self._imp_pos.append((find(r, int(self.dofmap.vf_dofs(vn, c))),
                                      find(r, int(self.dofmap.u_dofs(base, c))), nrm[c]))
        self.block_rows = {name: self._block_mask(name) for name in ("u_s", "v_f", "p", "ip")}

    def _block_mask(self, name):
        m = np.zeros(self.dofmap.total_dofs, bool)
        m[self.dofmap.field_slice(name)] = True
        return m & self.free_rows

    # -- step preparation ----------------------------------------------------

    def initial_state(self, t0: float = 0.0, z: np.ndarray | None = None, vs=None) -> State:
        """Quiescent (or given) state with no history."""
        n = self.dofmap.total_dofs
        z = np.zeros(n) if z is None else np.asarray(z, float).copy()
        vs = np.zeros((self.dofmap.n_p2, 2)) if vs is None else np.asarray(vs, float).copy()
        return State(t0, z, vs, ())

    def prepare_step(self, t: float, dt: float, order: int, history: Sequence[Snapshot]) -> StepData:
        """Freeze history terms, loads and boundary values for a step ending at ``t``."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        c = bdf_coefficients(order)
        if len(history) < order:
            raise ValueError(f"BDF{order} needs {order} history levels, got {len(history)}")
        hu = sum(c[k + 1] * history[k].u for k in range(order))
        hvs = sum(c[k + 1] * history[k].vs for k in range(order))
        hvf = sum(c[k + 1] * history[k].vf for k in range(order))
        load = self._loads(t)
        dir_vals = self._constraint_values(t)
        return StepData(t, dt, order, c[0], np.asarray(hu, float), np.asarray(hvs, float),
                        np.asarray(hvf, float), load, dir_vals)

    def _constraint_values(self, t):
        dm = self.dofmap
        vals = np.full(len(self.c_rows), np.nan)
        cache = {}
        for k, (kind, info) in enumerate(zip(self.c_kind, self.c_info)):
            if kind == "pin":
                vals[k] = info[0].value
            elif kind == "dir":
                d, fld, nd, comp = info
                if d.value is None:
                    vals[k] = 0.0
                    continue
                key = (id(d), fld)
                if key not in cache:
                    if fld == "u_s":
                        nodes = np.arange(dm.n_p2)
                        X = dm.p2_coords
                        regs = dm.vf_region[np.searchsorted(dm.vf_base, nodes)]
                    else:
                        X = dm.p2_coords[dm.vf_base]
                        regs = dm.vf_region
                    cache[key] = {}
                    sel = sorted({i[2] for kd, i in zip(self.c_kind, self.c_info)
                                  if kd == "dir" and i[0] is d and i[1] == fld})
                    sel = np.array(sel, np.int64)
                    v = np.asarray(d.value(X[sel], t, regs[sel]), float).reshape(-1, 2)
                    cache[key] = dict(zip(sel.tolist(), v))
                vals[k] = cache[key][nd][comp]
        return vals

    def _loads(self, t):
        dm = self.dofmap
        n = dm.total_dofs
        f = np.zeros(n)
        if self.forcing is not None:
            g, mat = self.vgeo, self.vmat
            su = np.zeros(g.X.shape)
            sf = np.zeros(g.X.shape)
            sp_ = np.zeros(g.X.shape[:2])
            for r in self.mesh.region_names:
                sel = self.mesh.regions == r
                a, b, c = self.forcing.volume(g.X[sel].reshape(-1, 2), t, r)
                su[sel] = np.asarray(a).reshape(-1, g.X.shape[1], 2)
                sf[sel] = np.asarray(b).reshape(-1, g.X.shape[1], 2)
                sp_[sel] = np.asarray(c).reshape(-1, g.X.shape[1])
            lu = np.einsum("kq,kqa,kqi->kai", g.w, g.N2, su).reshape(-1, 12)
            lv = np.einsum("kq,kqa,kqi->kai", g.w, g.N2, sf).reshape(-1, 12)
            lp = np.einsum("kq,kqa,kq->ka", g.w, g.N1, sp_)
            f += np.bincount(dm.elem_dofs.ravel(), np.hstack([lu, lv, lp]).ravel(), minlength=n)
            if self.mesh.n_facets:
                gp, gm = self.fgeo_p, self.fgeo_m
                q = gp.X.shape[1]
                rp_, rm_ = self.mesh.regions[gp.elem], self.mesh.regions[gm.elem]
                out = [np.zeros(gp.X.shape), np.zeros(gp.X.shape), np.zeros(gp.X.shape),
                       np.zeros(gp.X.shape[:2])]
                for key in sorted(set(zip(rp_.tolist(), rm_.tolist()))):
                    sel = (rp_ == key[0]) & (rm_ == key[1])
                    ms = np.repeat(self.f_normal[sel], q, axis=0)
                    res = self.forcing.interface(gm.X[sel].reshape(-1, 2), t, ms, key[0], key[1])
                    for o, v in zip(out, res):
                        o[sel] = np.asarray(v).reshape(o[sel].shape)
                s_u, s_fp, s_fm, s_ip = out
                lum = np.einsum("kq,kqa,kqi->kai", gm.w, gm.N2, s_u).reshape(-1, 12)
                lvp = np.einsum("kq,kqa,kqi->kai", gp.w, gp.N2, s_fp).reshape(-1, 12)
                lvm = np.einsum("kq,kqa,kqi->kai", gm.w, gm.N2, s_fm).reshape(-1, 12)
                lip = np.einsum("kq,qa,kq->ka", gm.w, self.f_Nip, s_ip)
                Fn = self.mesh.n_facets
                z12, z3 = np.zeros((Fn, 12)), np.zeros((Fn, 3))
                loc = np.hstack([z12, lvp, z3, lum, lvm, z3, lip])
                f += np.bincount(self.fdofs.ravel(), loc.ravel(), minlength=n)
        if self.bcs.traction:
            g = self.bgeo
            tags = self.mesh.boundary_tags
            for tr in self.bcs.traction:
                if tr.value is None:
                    continue
                sel = np.nonzero(tags == tr.tag)[0]
                if len(sel) == 0:
                    continue
                q = g.X.shape[1]
                data = np.zeros((len(sel), q, 2))
                regs = self.mesh.regions[g.elem[sel]]
                for r in sorted(set(regs.tolist())):
                    s2 = regs == r
                    ns = np.repeat(self.b_normal[sel][s2], q, axis=0)
                    data[s2] = np.asarray(tr.value(g.X[sel][s2].reshape(-1, 2), t, ns, r)).reshape(-1, q, 2)
                loc = np.einsum("kq,kqa,kqi->kai", g.w[sel], g.N2[sel], data).reshape(-1, 12)
                off = 0 if tr.field == "u_s" else 12
                full = np.zeros((len(sel), 27))
                full[:, off:off + 12] = loc
                f += np.bincount(self.bdofs[sel].ravel(), full.ravel(), minlength=n)
        return f

    # -- local kernels -------------------------------------------------------

    def _kernels(self, step: StepData):
        """Kernel bundles ``(name, dofs, elem, args)``.

        ``args = (hist, sc, geo, mat, extra)`` holds per-item arrays with a
        leading item axis, except ``sc`` (step scalars and constants).
        """
        dm, mesh = self.dofmap, self.mesh
        sc = dict(dt=float(step.dt), c0=float(step.c0), mu_S=float(self.interface.mu_S),
                  Nip=self.f_Nip)

        def hist(el):
            return (step.hu[dm.elem_p2[el]], step.hvs[dm.elem_p2[el]], step.hvf[dm.elem_vf[el]])

        ks = [("volume", dm.elem_dofs, self.vgeo.elem,
               (hist(self.vgeo.elem), sc, self._vgeo_d, self._vmat_d, {}))]
        if len(self.bdofs):
            extra = dict(normal=self.b_normal)
            ks.append(("boundary", self.bdofs, self.bgeo.elem,
                       (hist(self.bgeo.elem), sc, self._bgeo_d, self._bmat_d, extra)))
        if mesh.n_facets:
            tp, tm = self.fgeo_p.elem, self.fgeo_m.elem
            ks.append(("facet", self.fdofs, (tp, tm),
                       ((hist(tp), hist(tm)), sc, self._fgeo_d, self._fmat_d,
                        dict(normal=self.f_normal))))
        return ks

    # -- global operators ----------------------------------------------------

    def internal_residual(self, z: np.ndarray, step: StepData) -> np.ndarray:
        """Unconstrained residual without loads."""
        n = self.dofmap.total_dofs
        R = np.zeros(n)
        for name, dofs, elem, args in self._kernels(step):
            r = _KERNELS[name](np, z[dofs], *args, elem=elem)
            R += np.bincount(dofs.ravel(), r.ravel(), minlength=n)
        return R

    def residual(self, z: np.ndarray, step: StepData) -> np.ndarray:
        """Residual with loads and constraint rows applied."""
        R = self.internal_residual(z, step) - step.load
        return self._constrain_residual(R, z, step)

    def _constrain_residual(self, R, z, step):
        if len(self.c_rows) == 0:
            return R
        s = self.row_scale(step)
        rows = self.c_rows
        lin = np.isnan(step.dir_vals)
        R[rows[~lin]] = s * (z[rows[~lin]] - step.dir_vals[~lin])
        if lin.any():
            vn, base, n = self._imp_vn, self._imp_base, self._imp_n
            vf = z[self.dofmap.vf_dofs(vn)].reshape(-1, 2)
            u = z[self.dofmap.u_dofs(base)].reshape(-1, 2)
            vs = (step.c0 * u + step.hu[base]) / step.dt
            R[rows[lin]] = s * (n * (vf - vs)).sum(1)
        return R

    def row_scale(self, step: StepData) -> float:
        """Scale of constrained rows: mean magnitude of the Jacobian diagonal."""
        key = (step.dt, step.order)
        if key not in self._row_scale_cache:
            z = np.zeros(self.dofmap.total_dofs)
            A = self._raw_jacobian(z, step, "exact")
            d = np.abs(A.diagonal())
            d = d[self.free_rows & (d > 0)]
            self._row_scale_cache[key] = float(d.mean()) if len(d) else 1.0
        return self._row_scale_cache[key]

    def _local_jacobians(self, z, step, mode):
        out = []
        for name, dofs, elem, args in self._kernels(step):
            zl = z[dofs]
            K, m = zl.shape
            if mode == "exact":
                Jl = _chunked_jacobian(name, zl, args)
            elif mode == "finite-difference":
                kern = _KERNELS[name]
                Jl = np.empty((K, m, m))
                r0 = kern(np, zl, *args)
                for j in range(m):
                    h = 1e-7 * (1.0 + np.abs(zl[:, j]))
                    zp = zl.copy()
                    zp[:, j] += h
                    Jl[:, :, j] = (kern(np, zp, *args) - r0) / h[:, None]
            else:
                raise ValueError(f"unknown Jacobian mode {mode!r}; use one of {JACOBIAN_MODES}")
            out.append(Jl.reshape(-1))
        return out

    def _raw_jacobian(self, z, step, mode):
        n = self.dofmap.total_dofs
        parts = self._local_jacobians(z, step, mode)
        nc = len(self._pat_inv) - sum(len(p) for p in parts)
        vals = np.concatenate(parts + [np.zeros(nc)])
        data = np.bincount(self._pat_inv, vals, minlength=self._nnz)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(n, n))

    def jacobian(self, z: np.ndarray, step: StepData, mode: str = "exact") -> sp.csr_matrix:
        """Sparse Jacobian of :meth:`residual`."""
        A = self._raw_jacobian(z, step, mode)
        if len(self.c_rows):
            s = self.row_scale(step)
            A.data[self._c_row_pos] = 0.0
            A.data[self._c_diag_pos] = s
            for pv, pu, nc in self._imp_pos:
                A.data[pv] = s * nc
                A.data[pu] = -s * nc * step.c0 / step.dt
        return A

    # -- helpers for solvers and diagnostics ---------------------------------

    def impose(self, z: np.ndarray, step: StepData) -> np.ndarray:
        """Copy of ``z`` with prescribed values written into constrained dofs."""
        z = np.array(z, float, copy=True)
        lin = np.isnan(step.dir_vals)
        z[self.c_rows[~lin]] = step.dir_vals[~lin]
        return z

    def solid_velocity(self, z: np.ndarray, step: StepData) -> np.ndarray:
        u, _, _, _ = self.dofmap.split(z)
        return (step.c0 * u + step.hu) / step.dt

    def block_norms(self, R: np.ndarray) -> dict:
        return {k: float(np.linalg.norm(R[m])) for k, m in self.block_rows.items()}
