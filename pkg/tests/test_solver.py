import numpy as np
import pytest
import scipy.sparse as sp

from poromix.assembly import BoundaryConditions, Dirichlet, Problem
from poromix.constitutive import InterfaceParams
from poromix.mesh import gen_two_squares
from poromix.mms import ManufacturedSolution, error_norms, mms_initial_state, mms_problem, reference_materials
from poromix.solver import (
    LinearSolveError,
    NewtonError,
    SolverConfig,
    advance,
    integrate,
    linear_solve,
    newton_solve,
)

MS = ManufacturedSolution()
V = MS.u_o * np.pi / MS.t_o
SCALES = {"u_s": MS.p_o * MS.L, "v_f": MS.p_o * MS.L, "p": V * MS.L, "ip": V * MS.L}


def test_identity():
    b = np.arange(5.0)
    np.testing.assert_array_equal(linear_solve(sp.identity(5), b), b)


def test_zero_diagonal_pivoting():
    A = sp.csr_matrix([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(linear_solve(A, [1.0, 2.0]), [2.0, 1.0])


def test_random_sparse_against_dense():
    rng = np.random.default_rng(0)
    n = 500
    A = sp.random(n, n, density=0.01, random_state=rng) + sp.diags(rng.uniform(5, 10, n))
    b = rng.standard_normal(n)
    x = linear_solve(A.tocsr(), b)
    xd = np.linalg.solve(A.toarray(), b)
    assert np.linalg.norm(x - xd) <= 1e-10 * np.linalg.norm(xd)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)


def test_singular_reports_block():
    A = sp.csr_matrix(np.array([[1.0, 0, 0], [0, 0, 0], [0, 0, 2.0]]))
    blocks = {"u_s": np.array([True, False, False]), "p": np.array([False, True, True])}
    with pytest.raises(LinearSolveError, match="block p"):
        linear_solve(A, np.ones(3), blocks)
    A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(LinearSolveError):
        linear_solve(A, np.ones(2))


def test_newton_scalar():
    res = newton_solve(lambda z: z**2 - 2.0, lambda z: sp.csr_matrix(np.diag(2 * z)),
                       np.array([1.0]), lambda R: abs(R).max(), 1e-14)
    assert res.z[0] == pytest.approx(np.sqrt(2.0), rel=1e-14)
    h = res.history
    assert all(b < a for a, b in zip(h, h[1:]))
    # already converged: no iteration
    res = newton_solve(lambda z: z**2 - 2.0, lambda z: sp.csr_matrix(np.diag(2 * z)),
                       res.z, lambda R: abs(R).max(), 1e-12)
    assert res.iterations == 0
    with pytest.raises(NewtonError):
        newton_solve(lambda z: z**2 - 2.0, lambda z: sp.csr_matrix(np.diag(2 * z)),
                     np.array([10.0]), lambda R: abs(R).max(), 1e-12, max_iter=2)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(bdf_order=3)
    with pytest.raises(ValueError):
        SolverConfig(jacobian_mode="complex")
    with pytest.raises(ValueError):
        SolverConfig(scales={"p": -1.0})
    assert SolverConfig(dt=1e-3, t_end=0.1).n_steps == 100


def test_quiescent_step_stays_put():
    bcs = BoundaryConditions(dirichlet=[Dirichlet(t, f) for t in ("bottom", "top", "left", "right")
                                        for f in ("u_s", "v_f")])
    pb = Problem(gen_two_squares(1e-2, 2), reference_materials(), InterfaceParams(1e3), bcs)
    st = pb.initial_state()
    new, info = advance(pb, st, SolverConfig(dt=1e-3, t_end=1e-3, bdf_order=1))
    assert info.iterations == 0
    np.testing.assert_array_equal(new.z, st.z)
    assert new.t == pytest.approx(1e-3)


def test_linear_limit_converges_in_two_iterations():
    mats = {k: v.with_(mu_Re=v.mu_Re * 1e-12) for k, v in reference_materials().items()}
    ms = ManufacturedSolution(u_o=1e-12, p_o=1e-6, ip_o=1e-6, materials=mats)
    pb = mms_problem(gen_two_squares(ms.L, 4), ms)
    v = ms.u_o * np.pi
    sc = {"u_s": ms.p_o * ms.L, "v_f": ms.p_o * ms.L, "p": v * ms.L, "ip": v * ms.L}
    cfg = SolverConfig(dt=1e-3, t_end=1e-3, bdf_order=2, newton_tol=1e-8, scales=sc)
    _, info = advance(pb, mms_initial_state(pb, ms, cfg.dt), cfg)
    assert info.iterations <= 2


def test_saddle_point_on_smallest_mesh():
    pb = mms_problem(gen_two_squares(MS.L, 1), MS)
    cfg = SolverConfig(dt=1e-3, t_end=1e-3, newton_tol=1e-10, scales=SCALES)
    _, info = advance(pb, mms_initial_state(pb, MS, cfg.dt), cfg)
    assert info.history[-1] <= 1e-10


def test_superlinear_tail():
    pb = mms_problem(gen_two_squares(MS.L, 8), MS)
    cfg = SolverConfig(dt=1e-3, t_end=1e-3, newton_tol=1e-12, scales=SCALES)
    _, info = advance(pb, mms_initial_state(pb, MS, cfg.dt), cfg)
    h = info.history
    assert len(h) >= 3
    assert h[-1] / h[-2] <= 0.1 and h[-2] / h[-3] <= 0.1


def test_mms_run_completes():
    pb = mms_problem(gen_two_squares(MS.L, 8), MS)
    cfg = SolverConfig(dt=1e-3, t_end=0.1, newton_tol=1e-10, newton_max_iter=40,
                       jacobian_reuse=True, scales=SCALES)
    st, infos = integrate(pb, mms_initial_state(pb, MS, cfg.dt), cfg)
    assert len(infos) == 100 and st.t == pytest.approx(0.1)
    assert max(i.iterations for i in infos) <= cfg.newton_max_iter


def test_bdf2_close_to_bdf1():
    pb = mms_problem(gen_two_squares(MS.L, 2), MS)
    base = SolverConfig(dt=1e-2, t_end=0.1, newton_tol=1e-10, jacobian_reuse=True, scales=SCALES)
    out = {}
    for order in (1, 2):
        cfg = base.with_(bdf_order=order)
        st, _ = integrate(pb, mms_initial_state(pb, MS, cfg.dt), cfg)
        out[order] = st
    e1 = error_norms(pb, out[1].z, MS, 0.1)["u_s"]["L2_abs"]
    u1 = pb.dofmap.split(out[1].z)[0]
    u2 = pb.dofmap.split(out[2].z)[0]
    assert np.abs(u1 - u2).max() > 0
    assert np.sqrt(np.mean((u1 - u2) ** 2)) * MS.L * np.sqrt(2) <= 10 * e1
