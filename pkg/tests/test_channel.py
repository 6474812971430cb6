import numpy as np
import pytest

from poromix.channel import (
    ChannelError,
    ChannelProblem,
    default_grid,
    solve_channel,
    solve_channel_fd_oracle,
    solve_pseudo_no_slip,
)


def test_poiseuille_limit():
    d = 1e-2
    sol = solve_channel(ChannelProblem(H=1.0, eta=1.0, delta=d, gamma=1e9))
    # the bed slips by about delta V_u'(0): V_l(0) = d^2 + d a with a = V_u'(0)
    a = (0.5 - d**2) / (1 + d)
    assert sol.V_u(0.5) == pytest.approx(-0.125 + 0.5 * a + (0.5 - a), abs=1e-6)
    assert sol.V_u(0.5) == pytest.approx(0.125, abs=3e-3)


def test_deep_bed_plateau():
    pb = ChannelProblem(H=1.0, eta=1.0, delta=0.05, gamma=0.0)
    assert solve_channel(pb).V_l(-0.5) == pytest.approx(pb.eta * pb.delta**2, rel=1e-4)
    # a sheared bed keeps a decayed exponential of size |ct| e^{-10}
    for g in (1.0, 10.0, 1000.0):
        sol = solve_channel(ChannelProblem(1.0, 1.0, 0.05, g))
        rest = sol.V_l(-0.5) - pb.eta * pb.delta**2
        assert rest == pytest.approx((sol.ct + sol.st) * np.exp(-10.0), rel=1e-10)


@pytest.mark.parametrize("args", [(1.0, 1.0, 0.1, 1000.0), (0.25, 2.0, 0.05, 1.0), (1.0, 2.0, 1e-4, 10.0)])
def test_conditions_hold(args):
    sol = solve_channel(ChannelProblem(*args))
    assert np.abs(sol.residuals()).max() <= 1e-12
    assert sol.ode_residual() <= 1e-10
    assert np.all(np.isfinite(sol.profile()[1]))


def test_cosh_sinh_coefficients():
    pb = ChannelProblem(H=1.0, eta=2.0, delta=0.2, gamma=10.0)
    sol = solve_channel(pb)
    Z = np.linspace(-1, 0, 11)
    ref = pb.eta * pb.delta**2 + sol.c * np.cosh(Z / pb.delta) + sol.s * np.sinh(Z / pb.delta)
    np.testing.assert_allclose(sol.V_l(Z), ref, rtol=1e-12, atol=1e-14)


def test_matches_oracle_reference_case():
    pb = ChannelProblem(H=1.0, eta=1.0, delta=0.1, gamma=1000.0)
    sol = solve_channel(pb)
    orc = solve_channel_fd_oracle(pb, 20001)
    assert orc.max_difference(sol) <= 1e-6
    assert orc.V_upper[0] == pytest.approx(sol.V_u(0.0), abs=1e-6)


def test_oracle_is_second_order():
    pb = ChannelProblem(H=1.0, eta=2.0, delta=0.1, gamma=10.0)
    sol = solve_channel(pb)
    e1 = solve_channel_fd_oracle(pb, 1001).max_difference(sol)
    e2 = solve_channel_fd_oracle(pb, 2001).max_difference(sol)
    assert e1 / e2 == pytest.approx(4.0, rel=0.1)


def test_oracle_rejects_coarse_grid():
    with pytest.raises(ChannelError):
        solve_channel_fd_oracle(ChannelProblem(), 100)


def test_zero_friction_decouples():
    pb = ChannelProblem(H=0.7, eta=1.0, delta=0.1, gamma=0.0)
    sol = solve_channel(pb)
    Z = np.linspace(0, pb.H, 9)
    np.testing.assert_allclose(sol.V_u(Z), 0.5 * (pb.H**2 - Z**2), atol=1e-14)
    assert sol.dV_l(0.0) == pytest.approx(0.0, abs=1e-12)


def test_pseudo_no_slip():
    pb = ChannelProblem(H=1.0, eta=1.0, delta=0.1, gamma=1e9)
    ps = solve_pseudo_no_slip(pb)
    assert abs(ps.jump) <= 1e-14
    assert ps.dV_l(0.0) == pytest.approx(ps.dV_u(0.0), rel=1e-12)
    Z = np.linspace(-1, pb.H, 401)
    assert np.abs(solve_channel(pb).V(Z) - ps.V(Z)).max() <= 1e-6
    ps2 = solve_pseudo_no_slip(ChannelProblem(H=1.0, eta=2.0, delta=0.1))
    assert ps2.dV_l(0.0) == pytest.approx(2.0 * ps2.dV_u(0.0), rel=1e-12)


def test_jump_decreases_with_friction():
    jumps = [abs(solve_channel(ChannelProblem(1.0, 1.0, 0.1, 10.0**k)).jump) for k in range(7)]
    assert all(b < a for a, b in zip(jumps, jumps[1:]))
    assert jumps[-1] < 1e-5


@pytest.mark.parametrize("kw", [dict(H=0.0), dict(eta=-1.0), dict(delta=np.nan), dict(gamma=-1.0),
                                dict(gamma=np.inf)])
def test_invalid_parameters(kw):
    with pytest.raises(ChannelError):
        ChannelProblem(**kw)


def test_default_grid():
    g = default_grid()
    assert len(g) == 36
    assert (0.25, 2.0, 0.05, 1000.0) in g
