"""Pointwise kinematics and material laws of the solid-fluid mixture.

Tensors follow plane strain: the 3x3 forms carry an out-of-plane stretch of
one.  Functions broadcast over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

__all__ = [
    "MaterialParams",
    "InterfaceParams",
    "PointKinematics",
    "StateValidityError",
    "volume_fractions",
    "check_fractions",
    "embed_plane",
    "strain_energy",
    "elastic_stress",
    "elastic_cauchy_plane",
    "viscous_stresses",
    "darcy_drag",
    "nanson",
    "point_kinematics",
    "det2",
    "inv2",
    "sym",
    "PHI_BOUNDS",
]

PHI_BOUNDS = (1e-6, 1.0 - 1e-6)


class StateValidityError(ArithmeticError):
    """Kinematic state outside the admissible set (J <= 0 or bad fractions)."""


@dataclass(frozen=True)
class MaterialParams:
    """Constants of one subdomain.

    Attributes
    ----------
    rho_s_star, rho_f_star : float
        True densities of solid and fluid [kg/m^3].
    phi_Rs : float
        Referential solid volume fraction [-].
    kappa_s : float
        Permeability [m^2].
    mu_D : float
        Darcy viscosity [Pa s].
    mu_B_bar, mu_f_bar : float
        Brinkman and fluid viscosity coefficients [Pa s]; the effective
        values scale with ``phi_f**2``.
    mu_Re : float
        Referential shear modulus [Pa].
    b_s, b_f : tuple of float
        Body force densities [N/m^3].
    """

    rho_s_star: float = 1e3
    rho_f_star: float = 1e3
    phi_Rs: float = 0.4
    kappa_s: float = 1e-9
    mu_D: float = 1e-2
    mu_B_bar: float = 1e-2
    mu_f_bar: float = 1e-2
    mu_Re: float = 1e3
    b_s: tuple = (0.0, 0.0)
    b_f: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("rho_s_star", "rho_f_star", "kappa_s", "mu_D", "mu_B_bar", "mu_f_bar", "mu_Re"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if not (0.0 < self.phi_Rs < 1.0):
            raise ValueError(f"phi_Rs must lie in (0, 1), got {self.phi_Rs!r}")
        for name in ("b_s", "b_f"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 2:
                raise ValueError(f"{name} must have two components")
            object.__setattr__(self, name, v)

    def with_(self, **kw) -> "MaterialParams":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class InterfaceParams:
    """Interface viscosity ``mu_S`` [Pa s/m]."""

    mu_S: float = 1e3

    def __post_init__(self):
        if not (np.isfinite(self.mu_S) and self.mu_S >= 0):
            raise ValueError(f"mu_S must be non-negative, got {self.mu_S!r}")


def _real(a):
    return np.real(a) if np.iscomplexobj(a) else a


def check_fractions(phi_s, where: str = "") -> None:
    """Raise :class:`StateValidityError` if ``phi_s`` leaves its bounds."""
    ps = _real(np.asarray(phi_s))
    lo, hi = PHI_BOUNDS
    bad = ~((ps > lo) & (ps < hi))
    if np.any(bad):
        idx = np.unravel_index(int(np.argmax(bad)), ps.shape) if ps.ndim else ()
        raise StateValidityError(
            f"solid fraction {ps[idx]:.6g} outside ({lo:g}, {hi:g}){where} at index {idx}")


def volume_fractions(phi_Rs, J, check: bool = True):
    """Current fractions ``phi_s = phi_Rs / J`` and ``phi_f = 1 - phi_s``."""
    J = np.asarray(J)
    if check and np.any(_real(J) <= 0):
        raise StateValidityError("non-positive Jacobian determinant")
    phi_s = phi_Rs / J
    if check:
        check_fractions(phi_s)
    return phi_s, 1.0 - phi_s


def embed_plane(F2):
    """Embed in-plane 2x2 tensors into 3x3 with unit out-of-plane entry."""
    F2 = np.asarray(F2)
    F = np.zeros(F2.shape[:-2] + (3, 3), dtype=F2.dtype)
    F[..., :2, :2] = F2
    F[..., 2, 2] = 1.0
    return F


def det2(A):
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def inv2(A, det=None):
    det = det2(A) if det is None else det
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1]
    out[..., 1, 1] = A[..., 0, 0]
    out[..., 0, 1] = -A[..., 0, 1]
    out[..., 1, 0] = -A[..., 1, 0]
    return out / det[..., None, None]


def sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _as3(F):
    F = np.asarray(F)
    return embed_plane(F) if F.shape[-1] == 2 else F


def strain_energy(F, mu_Re):
    """Neo-Hookean isochoric energy ``0.5 mu (tr Cbar - 3)`` per unit solid volume."""
    F = _as3(F)
    J = np.linalg.det(F)
    I1 = np.einsum("...ij,...ij->...", F, F)
    return 0.5 * mu_Re * (J ** (-2.0 / 3.0) * I1 - 3.0)


def elastic_stress(F, mu_Re, phi_Rs):
    """Elastic first Piola and Cauchy stresses of the solid.

    Parameters
    ----------
    F : (..., 3, 3) or (..., 2, 2) array
        Deformation gradient; 2x2 input is embedded in plane strain.
    mu_Re : float
    phi_Rs : float

    Returns
    -------
    P, T : (..., 3, 3) arrays
        ``T = phi_Rs / J * mu_Re * dev(Bbar)`` and ``P = J T F^{-T}``.
    """
    F = _as3(F)
    J = np.asarray(np.linalg.det(F))
    if np.any(_real(J) <= 0):
        raise StateValidityError("non-positive Jacobian determinant")
    B = F @ np.swapaxes(F, -1, -2)
    Bbar = J[..., None, None] ** (-2.0 / 3.0) * B
    trB = np.trace(Bbar, axis1=-2, axis2=-1)
    dev = Bbar - trB[..., None, None] / 3.0 * np.eye(3)
    T = np.asarray(phi_Rs * mu_Re / J)[..., None, None] * dev
    P = J[..., None, None] * T @ np.swapaxes(np.linalg.inv(F), -1, -2)
    return P, T


def elastic_cauchy_plane(F2, J, mu_Re, phi_Rs):
    """In-plane block of the elastic Cauchy stress for a 2x2 ``F``.

    Same law as :func:`elastic_stress` with the out-of-plane stretch
    folded in analytically.
    """
    B = np.einsum("...ik,...jk->...ij", F2, F2)
    jm = J ** (-2.0 / 3.0)
    tr3 = (B[..., 0, 0] + B[..., 1, 1] + 1.0) / 3.0
    dev = B.copy()
    dev[..., 0, 0] -= tr3
    dev[..., 1, 1] -= tr3
    return (phi_Rs * mu_Re * jm / J)[..., None, None] * dev


def viscous_stresses(D_s, D_f, phi_f, mu_f_bar, mu_B_bar):
    """Brinkman-type solid stress and fluid viscous stress.

    Returns
    -------
    T_sv, T_fv
        ``2 mu_B (D_s - D_f)`` and ``2 mu_f D_f + 2 mu_B (D_f - D_s)`` with
        ``mu_B = mu_B_bar phi_f**2`` and ``mu_f = mu_f_bar phi_f**2``.
    """
    phi_f = np.asarray(phi_f)
    mu_B = (mu_B_bar * phi_f**2)[..., None, None]
    mu_f = (mu_f_bar * phi_f**2)[..., None, None]
    rel = D_s - D_f
    return 2 * mu_B * rel, 2 * mu_f * D_f - 2 * mu_B * rel


def darcy_drag(v_f, v_s, phi_f, mu_D, kappa_s):
    """Interaction force on the fluid, ``-(mu_D phi_f^2 / kappa_s)(v_f - v_s)``."""
    coef = mu_D * np.asarray(phi_f) ** 2 / kappa_s
    return -coef[..., None] * (np.asarray(v_f) - np.asarray(v_s))


def nanson(F, J, m_s):
    """Area vector ``J F^{-T} m_s`` and the spatial unit normal.

    Works with 2x2 or 3x3 ``F``; ``m_s`` must match its size.
    """
    F = np.asarray(F)
    m_s = np.asarray(m_s)
    if F.shape[-1] == 2:
        FinvT = np.swapaxes(inv2(F), -1, -2)
    else:
        FinvT = np.swapaxes(np.linalg.inv(F), -1, -2)
    if m_s.shape[-1] != F.shape[-1]:
        m_s = np.concatenate([m_s, np.zeros(m_s.shape[:-1] + (F.shape[-1] - m_s.shape[-1],))], -1)
    N = np.asarray(J)[..., None] * np.einsum("...ij,...j->...i", FinvT, m_s)
    size = np.sqrt(np.einsum("...i,...i->...", N, N))
    if np.any(_real(size) <= 0):
        raise StateValidityError("degenerate deformation gradient on the interface")
    return N, N / size[..., None]


@dataclass(frozen=True)
class PointKinematics:
    """Kinematic quantities at one or several points (3x3 plane strain)."""

    F_s: np.ndarray
    J_s: np.ndarray
    F_s_inv_T: np.ndarray
    C_s: np.ndarray
    C_bar: np.ndarray
    L_s: np.ndarray
    L_f: np.ndarray
    D_s: np.ndarray
    D_f: np.ndarray
    phi_s: np.ndarray
    phi_f: np.ndarray
    v_s: np.ndarray
    v_f: np.ndarray
    a_s: np.ndarray
    a_f: np.ndarray
    p: np.ndarray


def point_kinematics(grad_u, grad_vs, grad_vf, v_s, v_f, a_s, dt_vf, p, phi_Rs) -> PointKinematics:
    """Assemble :class:`PointKinematics` from referential gradients.

    ``grad_*`` are referential 2x2 gradients, velocities 2-vectors.  The
    fluid acceleration uses the ALE convective correction.
    """
    F2 = np.eye(2) + np.asarray(grad_u)
    J = det2(F2)
    phi_s, phi_f = volume_fractions(phi_Rs, J)
    Finv2 = inv2(F2, J)
    L_s2 = np.asarray(grad_vs) @ Finv2
    L_f2 = np.asarray(grad_vf) @ Finv2
    F = embed_plane(F2)
    C = np.swapaxes(F, -1, -2) @ F
    z = np.zeros(np.shape(v_s)[:-1] + (1,))
    a_f = np.einsum("...ij,...j->...i", L_f2, np.asarray(v_f) - np.asarray(v_s)) + dt_vf
    vec3 = lambda a: np.concatenate([np.asarray(a, float), z], -1)  # noqa: E731
    return PointKinematics(
        F_s=F, J_s=J, F_s_inv_T=np.swapaxes(embed_plane(Finv2), -1, -2), C_s=C,
        C_bar=J[..., None, None] ** (-2.0 / 3.0) * C if np.ndim(J) else J ** (-2.0 / 3.0) * C,
        L_s=embed_plane(L_s2) - _e33(L_s2), L_f=embed_plane(L_f2) - _e33(L_f2),
        D_s=sym(embed_plane(L_s2) - _e33(L_s2)), D_f=sym(embed_plane(L_f2) - _e33(L_f2)),
        phi_s=phi_s, phi_f=phi_f, v_s=vec3(v_s), v_f=vec3(v_f), a_s=vec3(a_s), a_f=vec3(a_f),
        p=np.asarray(p, float))


def _e33(A2):
    e = np.zeros(np.shape(A2)[:-2] + (3, 3))
    e[..., 2, 2] = 1.0
    return e
