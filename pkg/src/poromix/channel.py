"""Plane channel flow over a porous bed with a dissipative interface.

Dimensionless steady profiles: the free channel ``0 < Z < H`` carries
``V_u'' + 1 = 0`` and the porous bed ``-1 < Z < 0`` carries
``delta^2 V_l'' - V_l + eta delta^2 = 0``.  Both outer walls are no-slip.
At ``Z = 0`` the interface friction couples the two sides through

    V_u'(0) = (gamma / 2) (V_u(0) - V_l(0))
    V_l'(0) = (gamma eta / 2) (V_u(0) - V_l(0))

and the pseudo-no-slip limit replaces these by continuity of the velocity
and ``V_l'(0) = eta V_u'(0)``.

The bed solution is stored in the decaying exponential basis
``e^{Z/delta}``, ``e^{-(Z+1)/delta}``, which is bounded on ``[-1, 0]`` for
every ``delta`` and avoids the overflow of ``cosh`` and ``sinh``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "ChannelProblem",
    "ChannelSolution",
    "ChannelError",
    "solve_channel",
    "solve_pseudo_no_slip",
    "solve_channel_fd_oracle",
    "OracleProfiles",
    "default_grid",
]


class ChannelError(ValueError):
    """Invalid parameters or a singular interface system."""


@dataclass(frozen=True)
class ChannelProblem:
    """Channel height ratio ``H``, viscosity ratio ``eta``, bed decay length
    ``delta`` and interface friction ``gamma`` (all dimensionless)."""

    H: float = 1.0
    eta: float = 1.0
    delta: float = 0.1
    gamma: float = 1000.0

    def __post_init__(self):
        for name in ("H", "eta", "delta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ChannelError(f"{name} must be positive and finite, got {v!r}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ChannelError(f"gamma must be non-negative and finite, got {self.gamma!r}")


@dataclass(frozen=True)
class ChannelSolution:
    """Closed-form profiles.

    ``V_u(Z) = -Z^2/2 + a Z + b`` and
    ``V_l(Z) = eta delta^2 + ct e^{Z/delta} + st e^{-(Z+1)/delta}``.
    """

    problem: ChannelProblem
    a: float
    b: float
    ct: float
    st: float
    pseudo_no_slip: bool = False

    @property
    def c(self) -> float:
        """Coefficient of ``cosh(Z/delta)``."""
        return self.ct + self.st * np.exp(-1.0 / self.problem.delta)

    @property
    def s(self) -> float:
        """Coefficient of ``sinh(Z/delta)``."""
        return self.ct - self.st * np.exp(-1.0 / self.problem.delta)

    def V_u(self, Z):
        Z = np.asarray(Z, float)
        return -0.5 * Z**2 + self.a * Z + self.b

    def dV_u(self, Z):
        return -np.asarray(Z, float) + self.a

    def V_l(self, Z):
        Z = np.asarray(Z, float)
        d, eta = self.problem.delta, self.problem.eta
        return eta * d**2 + self.ct * np.exp(Z / d) + self.st * np.exp(-(Z + 1) / d)

    def dV_l(self, Z):
        Z = np.asarray(Z, float)
        d = self.problem.delta
        return (self.ct * np.exp(Z / d) - self.st * np.exp(-(Z + 1) / d)) / d

    def d2V_l(self, Z):
        Z = np.asarray(Z, float)
        d = self.problem.delta
        return (self.ct * np.exp(Z / d) + self.st * np.exp(-(Z + 1) / d)) / d**2

    def V(self, Z):
        """Profile on ``[-1, H]``; the upper branch is used at ``Z = 0``."""
        Z = np.asarray(Z, float)
        return np.where(Z >= 0, self.V_u(Z), self.V_l(np.minimum(Z, 0.0)))

    @property
    def jump(self) -> float:
        """Velocity jump ``V_u(0) - V_l(0)``."""
        return float(self.V_u(0.0) - self.V_l(0.0))

    def residuals(self) -> np.ndarray:
        """Residuals of the two wall and two interface conditions."""
        pb = self.problem
        j = self.jump
        if self.pseudo_no_slip:
            i1 = j
            i2 = float(self.dV_l(0.0) - pb.eta * self.dV_u(0.0))
        else:
            i1 = float(self.dV_u(0.0) - 0.5 * pb.gamma * j)
            i2 = float(self.dV_l(0.0) - 0.5 * pb.gamma * pb.eta * j)
        return np.array([float(self.V_u(pb.H)), float(self.V_l(-1.0)), i1, i2])

    def ode_residual(self, n: int = 1000) -> float:
        """Largest pointwise residual of the two ODEs on ``n`` samples each."""
        pb = self.problem
        Zl = np.linspace(-1.0, 0.0, n)
        rl = pb.delta**2 * self.d2V_l(Zl) - self.V_l(Zl) + pb.eta * pb.delta**2
        # V_u'' = -1 holds identically for the quadratic
        return float(np.abs(rl).max())

    def profile(self, n: int = 201):
        """Sampled ``(Z, V)`` over ``[-1, H]`` with both interface traces."""
        Zl = np.linspace(-1.0, 0.0, n)
        Zu = np.linspace(0.0, self.problem.H, n)
        return np.concatenate([Zl, Zu]), np.concatenate([self.V_l(Zl), self.V_u(Zu)])


def _solve(pb: ChannelProblem, rows, rhs, pseudo):
    A = np.array(rows, float)
    rhs = np.array(rhs, float)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise ChannelError(f"singular interface system (condition estimate {cond:.3e})")
    a, b, ct, st = np.linalg.solve(A, rhs)
    return ChannelSolution(pb, float(a), float(b), float(ct), float(st), pseudo)


def _wall_rows(pb):
    E = np.exp(-1.0 / pb.delta)
    ed2 = pb.eta * pb.delta**2
    rows = [[pb.H, 1.0, 0.0, 0.0], [0.0, 0.0, E, 1.0]]
    rhs = [0.5 * pb.H**2, -ed2]
    return rows, rhs, E, ed2


def solve_channel(pb: ChannelProblem) -> ChannelSolution:
    """Closed-form profiles with the dissipative interface conditions."""
    rows, rhs, E, ed2 = _wall_rows(pb)
    g, d, eta = pb.gamma, pb.delta, pb.eta
    # V_u'(0) - g/2 (V_u(0) - V_l(0)) = 0 with V_l(0) = ed2 + ct + st E
    rows.append([1.0, -0.5 * g, 0.5 * g, 0.5 * g * E])
    rhs.append(-0.5 * g * ed2)
    # V_l'(0) - g eta/2 (V_u(0) - V_l(0)) = 0
    ge = 0.5 * g * eta
    rows.append([0.0, -ge, 1.0 / d + ge, -E / d + ge * E])
    rhs.append(-ge * ed2)
    return _solve(pb, rows, rhs, False)


def solve_pseudo_no_slip(pb: ChannelProblem) -> ChannelSolution:
    """Profiles with continuous velocity and ``V_l'(0) = eta V_u'(0)``;
    ``gamma`` is ignored."""
    rows, rhs, E, ed2 = _wall_rows(pb)
    rows.append([0.0, 1.0, -1.0, -E])
    rhs.append(ed2)
    rows.append([-pb.eta, 0.0, 1.0 / pb.delta, -E / pb.delta])
    rhs.append(0.0)
    return _solve(pb, rows, rhs, True)


@dataclass(frozen=True)
class OracleProfiles:
    """Grid values of the finite-difference solution."""

    Z_lower: np.ndarray
    V_lower: np.ndarray
    Z_upper: np.ndarray
    V_upper: np.ndarray

    def max_difference(self, sol: ChannelSolution) -> float:
        return float(max(np.abs(self.V_lower - sol.V_l(self.Z_lower)).max(),
                         np.abs(self.V_upper - sol.V_u(self.Z_upper)).max()))


def solve_channel_fd_oracle(pb: ChannelProblem, n: int = 20001) -> OracleProfiles:
    """Second-order finite differences on ``n`` uniform points per region.

    Interface derivatives use one-sided three-point formulas.
    """
    n = int(n)
    if n < 1000:
        raise ChannelError("the oracle needs at least 1000 points per region")
    Zl = np.linspace(-1.0, 0.0, n)
    Zu = np.linspace(0.0, pb.H, n)
    hl, hu = Zl[1] - Zl[0], Zu[1] - Zu[0]
    d2, g, eta = pb.delta**2, pb.gamma, pb.eta
    N = 2 * n
    L_, U_ = 0, n  # offsets of the lower and upper unknowns
    r, c, v = [], [], []
    rhs = np.zeros(N)

    def add(i, j, val):
        r.append(i)
        c.append(j)
        v.append(val)

    # lower region: wall, interior, interface
    add(0, L_, 1.0)
    k = np.arange(1, n - 1)
    for off, val in ((-1, d2 / hl**2), (0, -2 * d2 / hl**2 - 1.0), (1, d2 / hl**2)):
        r.extend((L_ + k).tolist())
        c.extend((L_ + k + off).tolist())
        v.extend([val] * len(k))
    rhs[L_ + k] = -eta * d2
    # V_l'(0) - g eta/2 (V_u(0) - V_l(0)) = 0
    i = L_ + n - 1
    add(i, L_ + n - 1, 1.5 / hl + 0.5 * g * eta)
    add(i, L_ + n - 2, -2.0 / hl)
    add(i, L_ + n - 3, 0.5 / hl)
    add(i, U_, -0.5 * g * eta)
    # upper region: interface, interior, wall
    # V_u'(0) - g/2 (V_u(0) - V_l(0)) = 0
    i = U_
    add(i, U_, -1.5 / hu - 0.5 * g)
    add(i, U_ + 1, 2.0 / hu)
    add(i, U_ + 2, -0.5 / hu)
    add(i, L_ + n - 1, 0.5 * g)
    for off, val in ((-1, 1 / hu**2), (0, -2 / hu**2), (1, 1 / hu**2)):
        r.extend((U_ + k).tolist())
        c.extend((U_ + k + off).tolist())
        v.extend([val] * len(k))
    rhs[U_ + k] = -1.0
    add(U_ + n - 1, U_ + n - 1, 1.0)
    A = sp.csc_matrix((v, (r, c)), shape=(N, N))
    try:
        x = spla.spsolve(A, rhs)
    except RuntimeError as exc:  # pragma: no cover - scipy raises on exact singularity
        raise ChannelError(f"singular discrete system: {exc}") from None
    if not np.all(np.isfinite(x)):
        raise ChannelError("singular discrete system")
    return OracleProfiles(Zl, x[L_:L_ + n], Zu, x[U_:U_ + n])


def default_grid():
    """Parameter tuples ``(H, eta, delta, gamma)`` of the oracle comparison."""
    return [(H, eta, d, g) for H in (1.0, 0.25) for eta in (1.0, 2.0)
            for d in (0.05, 0.1, 0.2) for g in (1.0, 10.0, 1000.0)]
