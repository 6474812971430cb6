import numpy as np
import pytest
import scipy.sparse.linalg as spla

from poromix.assembly import (
    BoundaryConditions,
    Dirichlet,
    Problem,
    Snapshot,
    ale_fluid_acceleration,
    bdf_rates,
)
from poromix.constitutive import InterfaceParams
from poromix.mesh import Mesh, gen_two_squares
from poromix.mms import ManufacturedSolution, interpolate_exact, mms_initial_state, mms_problem, reference_materials
from poromix.solver import scaled_norm

MS = ManufacturedSolution()
V = MS.u_o * np.pi / MS.t_o


def exact_step(pb, ms, t, dt, order=2):
    """Interpolated exact state at ``t`` with exact history levels."""
    dm = pb.dofmap
    hist = []
    for k in range(1, order + 1):
        zh, vsh = interpolate_exact(pb, ms, t - k * dt)
        u, vf, _, _ = dm.split(zh)
        hist.append(Snapshot(t - k * dt, u.copy(), vsh, vf.copy()))
    step = pb.prepare_step(t, dt, order, hist)
    z, _ = interpolate_exact(pb, ms, t)
    return z, step


def _zero_history(pb, t, dt, order=1):
    dm = pb.dofmap
    s = Snapshot(t - dt, np.zeros((dm.n_p2, 2)), np.zeros((dm.n_p2, 2)),
                 np.zeros((len(dm.vf_base), 2)))
    return pb.prepare_step(t, dt, order, [s] * order)


def test_bdf_constant_and_linear():
    y = np.array([2.0, -1.0])
    for order in (1, 2):
        vs, a, dvf = bdf_rates((y, y), [(y, 0 * y, y)] * 2, 0.1, order)
        np.testing.assert_allclose(vs, 0.0)
        np.testing.assert_allclose(a, 0.0)
        np.testing.assert_allclose(dvf, 0.0)
    # y = 3t: rate 3 for both orders
    for order in (1, 2):
        cur = np.array(3.0)
        hist = [(np.array(2.7), np.array(3.0), np.array(2.7)), (np.array(2.4), np.array(3.0), np.array(2.4))]
        vs, a, dvf = bdf_rates((cur, cur), hist, 0.1, order)
        assert vs == pytest.approx(3.0) and dvf == pytest.approx(3.0) and a == pytest.approx(0.0, abs=1e-12)


def test_bdf_quadratic():
    t2 = lambda t: np.array(t * t)  # noqa: E731
    hist = [(t2(0.9), None, t2(0.9)), (t2(0.8), None, t2(0.8))]
    hist = [(h[0], np.array(0.0), h[2]) for h in hist]
    _, _, d2 = bdf_rates((t2(1.0), t2(1.0)), hist, 0.1, 2)
    _, _, d1 = bdf_rates((t2(1.0), t2(1.0)), hist, 0.1, 1)
    assert d2 == pytest.approx(2.0, rel=1e-12)
    assert d1 == pytest.approx(1.9, rel=1e-12)


def test_bdf_errors():
    with pytest.raises(ValueError):
        bdf_rates((1.0, 1.0), [(1.0, 0.0, 1.0)], 0.1, 2)
    with pytest.raises(ValueError):
        bdf_rates((1.0, 1.0), [(1.0, 0.0, 1.0)], 0.0, 1)


def test_ale_acceleration():
    rng = np.random.default_rng(0)
    dvf = rng.standard_normal((5, 2))
    G = rng.standard_normal((5, 2, 2))
    v = rng.standard_normal((5, 2))
    np.testing.assert_allclose(ale_fluid_acceleration(dvf, G, np.eye(2), v, v), dvf)
    # v_f = (x, 0): grad = diag(1, 0)
    x = rng.uniform(0, 1, 5)
    vf = np.stack([x, 0 * x], 1)
    a = ale_fluid_acceleration(np.zeros((5, 2)), np.broadcast_to(np.diag([1.0, 0.0]), (5, 2, 2)),
                               np.eye(2), vf, np.zeros((5, 2)))
    np.testing.assert_allclose(a, vf)
    np.testing.assert_allclose(ale_fluid_acceleration(np.zeros((5, 2)), np.zeros((5, 2, 2)),
                                                      np.eye(2), v, 0 * v), 0.0)


def _plain_problem(n=3, bcs=None, mu_S=1e3):
    return Problem(gen_two_squares(1e-2, n), reference_materials(), InterfaceParams(mu_S), bcs)


def test_quiescent_residual_vanishes():
    bcs = BoundaryConditions(dirichlet=[Dirichlet("bottom", "u_s"), Dirichlet("left", "v_f")])
    pb = _plain_problem(bcs=bcs)
    step = _zero_history(pb, 1e-3, 1e-3)
    R = pb.residual(np.zeros(pb.dofmap.total_dofs), step)
    assert np.abs(R).max() <= 1e-14


def test_rigid_translation_residual_vanishes():
    # the fluid interface term carries [[k_f + phi_f ip]]; with phi_f jumping
    # between regions it balances for the constant multiplier -rho_f* |c|^2 / 2
    pb = _plain_problem()
    dm = pb.dofmap
    c = np.array([3e-3, -2e-3])
    t, dt = 0.2, 1e-2
    hist = [Snapshot(t - dt, np.tile(c * (t - dt), (dm.n_p2, 1)), np.tile(c, (dm.n_p2, 1)),
                     np.tile(c, (len(dm.vf_base), 1)))]
    step = pb.prepare_step(t, dt, 1, hist)
    z = np.zeros(dm.total_dofs)
    u, vf, _, ip = dm.split(z)
    u[:] = c * t
    vf[:] = c
    ip[:] = -0.5 * reference_materials()["A"].rho_f_star * (c @ c)
    R = pb.residual(z, step)
    # reference: the same motion with a relative fluid velocity of size |c|
    vf[:] = 2 * c
    Rref = pb.residual(z, step)
    assert np.linalg.norm(R) <= 1e-12 * np.linalg.norm(Rref)


def test_mms_consistency():
    norms = []
    for n in (8, 16, 32):
        pb = mms_problem(gen_two_squares(MS.L, n), MS)
        z, step = exact_step(pb, MS, 0.1, 1e-3)
        norms.append(pb.block_norms(pb.residual(z, step)))
    for a, b in zip(norms, norms[1:]):
        for k in a:
            assert a[k] / b[k] >= 4.0, (k, a[k] / b[k])


def test_linear_limit_single_newton_step():
    mats = {k: v.with_(mu_Re=v.mu_Re * 1e-12) for k, v in reference_materials().items()}
    ms = ManufacturedSolution(u_o=1e-12, p_o=1e-6, ip_o=1e-6, materials=mats)
    pb = mms_problem(gen_two_squares(ms.L, 4), ms)
    st = mms_initial_state(pb, ms, 1e-3)
    step = pb.prepare_step(1e-3, 1e-3, 1, st.bdf_history(pb.dofmap))
    v = ms.u_o * np.pi
    sc = {"u_s": ms.p_o * ms.L, "v_f": ms.p_o * ms.L, "p": v * ms.L, "ip": v * ms.L}
    z0 = pb.impose(st.z, step)
    R0 = pb.residual(z0, step)
    z1 = z0 + spla.spsolve(pb.jacobian(z0, step).tocsc(), -R0)
    ratio = scaled_norm(pb, R0, sc) / scaled_norm(pb, pb.residual(z1, step), sc)
    assert ratio >= 1e6


@pytest.mark.parametrize("mode", ["exact", "finite-difference"])
def test_directional_derivative(mode):
    pb = mms_problem(gen_two_squares(MS.L, 2), MS)
    z, step = exact_step(pb, MS, 0.05, 1e-3)
    dm = pb.dofmap
    rng = np.random.default_rng(1)
    dz = np.zeros(dm.total_dofs)
    for f, m in {"u_s": MS.u_o, "v_f": V, "p": MS.p_o, "ip": MS.ip_o}.items():
        dz[dm.field_slice(f)] = m * rng.uniform(-1, 1, dm.sizes[f])
    Jd = pb.jacobian(z, step, mode) @ dz
    R0 = pb.residual(z, step)
    if mode == "exact":
        eps = (1e-3, 1e-4, 1e-5)
        err = [np.linalg.norm(pb.residual(z + e * dz, step) - R0 - e * Jd) for e in eps]
        slope = np.polyfit(np.log10(eps), np.log10(err), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.1)
    else:
        # forward differences with step 1e-7 (1 + |z|) are first-order accurate
        Je = pb.jacobian(z, step, "exact") @ dz
        assert np.linalg.norm(Jd - Je) <= 1e-3 * np.linalg.norm(Je)


def test_multiplier_rows_are_local():
    pb = mms_problem(gen_two_squares(MS.L, 4), MS)
    z, step = exact_step(pb, MS, 0.05, 1e-3)
    A = pb.jacobian(z, step).tocsr()
    dm = pb.dofmap
    near = np.unique(dm.elem_dofs[np.concatenate([pb.mesh.facet_plus, pb.mesh.facet_minus])])
    us, vf = dm.field_slice("u_s"), dm.field_slice("v_f")
    for r in range(dm.field_slice("ip").start, dm.field_slice("ip").stop):
        cols = A.indices[A.indptr[r]:A.indptr[r + 1]][A.data[A.indptr[r]:A.indptr[r + 1]] != 0]
        assert len(cols)
        assert np.all(((cols >= us.start) & (cols < vf.stop)))
        assert np.all(np.isin(cols, near))


def test_single_region_equivalence():
    """With equal materials and continuous fields the interface terms cancel.

    The displacement is affine so that ``J`` and ``phi_f`` are single valued
    across the interface; a discrete P2 displacement has a two-valued gradient.
    """
    mat = reference_materials()["A"]
    two = gen_two_squares(1e-2, 3)
    one = Mesh(nodes=two.nodes, triangles=two.triangles, regions=["A"] * two.n_triangles,
               boundary_edges=two.boundary_edges, boundary_tags=two.boundary_tags)
    p2 = Problem(two, {"A": mat, "B": mat}, InterfaceParams(1e3))
    p1 = Problem(one, {"A": mat}, InterfaceParams(1e3))
    d2, d1 = p2.dofmap, p1.dofmap
    np.testing.assert_array_equal(d1.p2_coords, d2.p2_coords)

    def fields(X):
        x, y = X[:, 0] / 1e-2, X[:, 1] / 1e-2
        return (1e-4 * np.stack([0.3 * x + 0.1 * y, -0.2 * x + 0.5 * y], 1), 1e-3 * np.stack([np.cos(2 * x), y * y], 1),
                1e2 * (x - y + x * y))

    def state(pb):
        dm = pb.dofmap
        z = np.zeros(dm.total_dofs)
        u, vf, p, _ = dm.split(z)
        u[:] = fields(dm.p2_coords)[0]
        vf[:] = fields(dm.p2_coords[dm.vf_base])[1]
        p[:] = fields(pb.mesh.nodes[dm.p_base])[2]
        hist = Snapshot(0.0, 0.5 * u.copy(), 0.3 * u.copy(), 0.9 * vf.copy())
        return z, pb.prepare_step(1e-2, 1e-2, 1, [hist])

    z1, s1 = state(p1)
    z2, s2 = state(p2)
    R1, R2 = p1.residual(z1, s1), p2.residual(z2, s2)
    # fold the duplicated copies back onto their base nodes
    fold_v = np.zeros((d1.n_p2, 2))
    np.add.at(fold_v, d2.vf_base, R2[d2.field_slice("v_f")].reshape(-1, 2))
    fold_p = np.zeros(one.n_nodes)
    np.add.at(fold_p, d2.p_base, R2[d2.field_slice("p")])
    scale = np.abs(R1).max()
    np.testing.assert_allclose(R2[d2.field_slice("u_s")], R1[d1.field_slice("u_s")], atol=1e-12 * scale)
    np.testing.assert_allclose(fold_v.ravel(), R1[d1.field_slice("v_f")], atol=1e-12 * scale)
    np.testing.assert_allclose(fold_p, R1[d1.field_slice("p")], atol=1e-12 * scale)
    # weak continuity of the normal flux holds trivially
    assert np.abs(R2[d2.field_slice("ip")]).max() <= 1e-12 * scale
