"""Newton iteration, sparse direct solves and the fixed-step BDF time loop."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
import logging
import time
from typing import Callable

import cvxopt
from cvxopt import umfpack
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import JACOBIAN_MODES, Problem, State, StepData
from .constitutive import StateValidityError

__all__ = [
    "SolverConfig",
    "NewtonError",
    "LinearSolveError",
    "NewtonResult",
    "StepInfo",
    "LinearSolver",
    "linear_solve",
    "newton_solve",
    "advance",
    "integrate",
    "scaled_norm",
]

log = logging.getLogger(__name__)


class NewtonError(RuntimeError):
    """Newton iteration did not converge."""


class LinearSolveError(RuntimeError):
    """Singular or inaccurate linear system."""


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping and nonlinear-solver settings.

    Attributes
    ----------
    dt, t_end : float
        Step size and final time [s].
    bdf_order : {1, 2}
        BDF2 runs start with one BDF1 step when only one level is known.
    newton_tol : float
        Bound on the scaled residual norm (see :func:`scaled_norm`).
    newton_max_iter : int
    jacobian_mode : {'exact', 'finite-difference'}
        ``exact`` differentiates the element kernels with forward-mode AD.
    deterministic_mode : bool
        Sequential evaluation everywhere; outputs are bitwise reproducible.
    jacobian_reuse : bool
        Keep the LU factors across iterations and steps while the
        iteration contracts fast enough (modified Newton).
    reuse_ratio : float
        Refactor when a reused Jacobian reduces the residual by less than
        this factor.
    max_halvings : int
        Line-search halvings allowed per iteration.
    scales : dict
        Characteristic magnitude of each residual block
        (``u_s``, ``v_f``, ``p``, ``ip``).
    """

    dt: float = 1e-3
    t_end: float = 0.1
    bdf_order: int = 2
    newton_tol: float = 1e-8
    newton_max_iter: int = 25
    jacobian_mode: str = "exact"
    deterministic_mode: bool = True
    jacobian_reuse: bool = False
    reuse_ratio: float = 0.2
    max_halvings: int = 8
    scales: dict = field(default_factory=lambda: {"u_s": 1.0, "v_f": 1.0, "p": 1.0, "ip": 1.0})

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not (self.t_end >= 0):
            raise ValueError("t_end must be non-negative")
        if self.bdf_order not in (1, 2):
            raise ValueError("bdf_order must be 1 or 2")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if int(self.newton_max_iter) < 1:
            raise ValueError("newton_max_iter must be at least 1")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ValueError(f"jacobian_mode must be one of {JACOBIAN_MODES}")
        if not 0 < self.reuse_ratio < 1:
            raise ValueError("reuse_ratio must lie in (0, 1)")
        sc = dict(self.scales)
        for k in ("u_s", "v_f", "p", "ip"):
            sc.setdefault(k, 1.0)
            if not sc[k] > 0:
                raise ValueError(f"scale for {k} must be positive")
        object.__setattr__(self, "scales", sc)

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


def scaled_norm(problem: Problem, R: np.ndarray, scales: dict) -> float:
    """Largest block norm ``||R_block|| / scale_block`` over free rows."""
    norms = problem.block_norms(R)
    return max(norms[k] / scales[k] for k in norms)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

class LinearSolver:
    """Sparse LU (UMFPACK) with row/column equilibration.

    Parameters
    ----------
    A : sparse matrix
    blocks : dict, optional
        Field name to boolean row mask; used to name the block of a
        singular pivot.
    """

    def __init__(self, A, blocks: dict | None = None):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise LinearSolveError(f"matrix must be square, got {A.shape}")
        absA = abs(A)
        rmax = np.asarray(absA.max(axis=1).todense()).ravel()
        if np.any(rmax == 0):
            raise LinearSolveError(_blame("zero row", np.nonzero(rmax == 0)[0], blocks))
        dr = 1.0 / rmax
        B = sp.diags(dr) @ A
        cmax = np.asarray(abs(B).max(axis=0).todense()).ravel()
        if np.any(cmax == 0):
            raise LinearSolveError(_blame("zero column", np.nonzero(cmax == 0)[0], blocks))
        dc = 1.0 / cmax
        B = (B @ sp.diags(dc)).tocoo()
        self.M = cvxopt.spmatrix(cvxopt.matrix(B.data), cvxopt.matrix(B.row.astype(np.int64)),
                                 cvxopt.matrix(B.col.astype(np.int64)), B.shape)
        try:
            self.lu = umfpack.numeric(self.M, umfpack.symbolic(self.M))
        except ArithmeticError:
            raise LinearSolveError(_singular_pivot(B, blocks)) from None
        self.A, self.dr, self.dc = A, dr, dc

    def _solve(self, b):
        x = cvxopt.matrix(self.dr * b)
        umfpack.solve(self.M, self.lu, x)
        return self.dc * np.array(x).ravel()

    def solve(self, b, tol: float = 1e-12, max_refine: int = 3):
        b = np.asarray(b, float)
        x = self._solve(b)
        nb = np.linalg.norm(b)
        if nb == 0:
            return x
        for _ in range(max_refine):
            r = b - self.A @ x
            if np.linalg.norm(r) <= tol * nb:
                break
            x += self._solve(r)
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("non-finite solution (numerically singular matrix)")
        return x


def _singular_pivot(B, blocks):
    # UMFPACK does not report the pivot; SuperLU on the same matrix does
    try:
        lu = spla.splu(B.tocsc(), permc_spec="COLAMD")
    except RuntimeError as exc:
        return f"factorization failed: {exc}"
    d = np.abs(lu.U.diagonal())
    bad = np.nonzero(d <= 1e-14 * d.max())[0]
    if not bad.size:
        return "numerically singular matrix"
    return _blame("numerically singular pivot", lu.perm_c[bad], blocks)


def _blame(what, idx, blocks):
    if not blocks:
        return f"{what} at index {int(idx[0])}"
    names = [k for k, m in blocks.items() if m[int(idx[0])]]
    return f"{what} at index {int(idx[0])} (block {names[0] if names else 'constrained'})"


def linear_solve(A, b, blocks: dict | None = None) -> np.ndarray:
    """Solve ``A x = b`` by sparse LU with partial pivoting."""
    return LinearSolver(A, blocks).solve(b)


# ---------------------------------------------------------------------------
# Newton
# ---------------------------------------------------------------------------

@dataclass
class NewtonResult:
    z: np.ndarray
    iterations: int
    history: list
    factorizations: int = 0


def newton_solve(residual: Callable, jacobian: Callable, z0: np.ndarray, norm: Callable,
                 tol: float, max_iter: int = 25, max_halvings: int = 8,
                 reuse: bool = False, cache: dict | None = None, reuse_ratio: float = 0.2,
                 blocks: dict | None = None) -> NewtonResult:
    """Newton iteration with a halving line search.

    Parameters
    ----------
    residual, jacobian : callables of ``z``
    z0 : ndarray
    norm : callable
        Scaled norm of a residual vector.
    tol : float
    reuse : bool
        Modified Newton: keep the factorization stored in ``cache['lu']``
        while each step reduces the norm by at least ``reuse_ratio``.

    Raises
    ------
    NewtonError
        No convergence, or no decrease after ``max_halvings`` halvings.
    """
    cache = {} if cache is None else cache
    z = np.array(z0, float, copy=True)
    R = residual(z)
    r = norm(R)
    hist = [r]
    nfact = 0
    if r <= tol:
        return NewtonResult(z, 0, hist, 0)
    fresh = False
    for it in range(1, max_iter + 1):
        if not reuse or cache.get("lu") is None:
            cache["lu"] = LinearSolver(jacobian(z), blocks)
            nfact += 1
            fresh = True
        dz = cache["lu"].solve(-R)
        alpha, accepted = 1.0, False
        for _ in range(max_halvings + 1):
            zt = z + alpha * dz
            try:
                Rt = residual(zt)
                rt = norm(Rt)
            except StateValidityError:
                rt = np.inf
            if np.isfinite(rt) and rt < r:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if reuse and not fresh:
                cache["lu"] = None
                continue
            raise NewtonError(f"no residual decrease at iteration {it} (norm {r:.3e})")
        if reuse and (alpha < 1.0 or rt > reuse_ratio * r):
            cache["lu"] = None
        fresh = False
        z, R, r = zt, Rt, rt
        hist.append(r)
        if r <= tol:
            return NewtonResult(z, it, hist, nfact)
    raise NewtonError(f"not converged after {max_iter} iterations (norm {r:.3e}, tol {tol:.1e})")


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

@dataclass
class StepInfo:
    t: float
    iterations: int
    history: list
    factorizations: int
    ip_residual: float
    wall: float


def _predict(problem: Problem, state: State, step: StepData) -> np.ndarray:
    """Extrapolate displacement with the last solid velocity; keep the rest."""
    dm = problem.dofmap
    z = state.z.copy()
    u = z[dm.field_slice("u_s")].reshape(-1, 2)
    u += step.dt * state.vs
    return problem.impose(z, step)


def advance(problem: Problem, state: State, config: SolverConfig, order: int | None = None,
            cache: dict | None = None) -> tuple[State, StepInfo]:
    """Take one implicit step from ``state``.

    The BDF order is reduced to the available history depth.
    """
    t0 = time.perf_counter()
    dm = problem.dofmap
    history = state.bdf_history(dm)
    order = min(order or config.bdf_order, len(history))
    t_new = state.t + config.dt
    step = problem.prepare_step(t_new, config.dt, order, history)
    z0 = _predict(problem, state, step)
    scales = config.scales

    res = newton_solve(
        lambda z: problem.residual(z, step),
        lambda z: problem.jacobian(z, step, config.jacobian_mode),
        z0, lambda R: scaled_norm(problem, R, scales), config.newton_tol,
        config.newton_max_iter, config.max_halvings, config.jacobian_reuse,
        cache if config.jacobian_reuse else None, config.reuse_ratio, problem.block_rows)
    z = res.z
    R = problem.residual(z, step)
    ip_res = float(np.linalg.norm(R[problem.block_rows["ip"]]))
    vs = problem.solid_velocity(z, step)
    new = State(t_new, z, vs, history[:1])
    info = StepInfo(t_new, res.iterations, res.history, res.factorizations, ip_res,
                    time.perf_counter() - t0)
    return new, info


def integrate(problem: Problem, state: State, config: SolverConfig,
              callback: Callable[[int, State, StepInfo], None] | None = None):
    """Advance ``config.n_steps`` steps; returns the final state and step infos."""
    infos = []
    cache: dict = {}
    for k in range(1, config.n_steps + 1):
        key = (config.dt, min(config.bdf_order, len(state.bdf_history(problem.dofmap))))
        if cache.get("key") != key:
            cache.clear()
            cache["key"] = key
        try:
            state, info = advance(problem, state, config, cache=cache)
        except (NewtonError, LinearSolveError, StateValidityError) as exc:
            raise type(exc)(f"step {k} (t = {state.t + config.dt:.6g} s): {exc}") from exc
        infos.append(info)
        log.debug("step %d t=%.4g iters=%d res=%s", k, info.t, info.iterations,
                  ", ".join(f"{h:.2e}" for h in info.history))
        if callback is not None:
            callback(k, state, info)
    return state, infos
