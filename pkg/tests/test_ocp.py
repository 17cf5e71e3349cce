import numpy as np
import pytest

from rollmpc import gait as g
from rollmpc import model as m
from rollmpc import ocp
from rollmpc.fastpath import DynamicsRuntime
from rollmpc.numerics import make_time_grid


@pytest.fixture(scope="module")
def setup():
    robot = m.RobotModel()
    terrain = m.Terrain()
    x0 = robot.nominal_state()
    return robot, terrain, x0


def gravity_comp(robot):
    u = np.zeros(24)
    for leg in range(4):
        u[3 * leg + 2] = robot.mass * robot.gravity / 4
    return u


def make_problem(robot, terrain, x0, v_body=(0, 0.3, 0), horizon=0.8):
    cfg = g.GaitConfig()
    legs = g.measured_leg_states(robot, terrain, x0, 0.0)
    ref = g.ReferenceTrajectory.from_velocity_profile(
        lambda t: np.asarray(v_body, dtype=float), lambda t: 0.0,
        0.0, horizon + 1.0, cfg.dt_grid, start_position=(0, 0, x0[5]))
    sched = g.generate_gait(cfg, legs, None, ref, horizon)
    cost = ocp.CostConfig.from_weights(lambda t: x0,
                                       lambda t: gravity_comp(robot))
    rt = DynamicsRuntime(robot, terrain)
    return ocp.assemble_ocp(robot, terrain, sched, cost,
                            ocp.SwingProfile(), x0, rt,
                            times=make_time_grid(horizon, 0.015))


# --- Running cost ----------------------------------------------------------

def test_cost_zero_at_reference(setup):
    robot, terrain, x0 = setup
    u_ref = gravity_comp(robot)
    cfg = ocp.CostConfig.from_weights(lambda t: x0, lambda t: u_ref)
    val, lx, lu, _, _ = ocp.running_cost(cfg, x0, u_ref, 0.0)
    assert val == 0.0
    assert np.allclose(lx, 0.0)
    assert np.allclose(lu, 0.0)


def test_cost_single_coordinate_quadratic(setup):
    robot, terrain, x0 = setup
    u_ref = gravity_comp(robot)
    cfg = ocp.CostConfig.from_weights(lambda t: x0, lambda t: u_ref)
    delta = 0.17
    x = x0.copy()
    x[4] += delta  # position weight 200
    val, *_ = ocp.running_cost(cfg, x, u_ref, 0.0)
    assert val == pytest.approx(0.5 * 200.0 * delta ** 2)


def test_cost_gradients_match_finite_differences(setup):
    robot, terrain, x0 = setup
    rng = np.random.default_rng(1)
    u_ref = gravity_comp(robot)
    cfg = ocp.CostConfig.from_weights(lambda t: x0, lambda t: u_ref)
    h = 1e-6
    for _ in range(10):
        x = x0 + 0.3 * rng.standard_normal(24)
        u = u_ref + 20 * rng.standard_normal(24)
        _, lx, lu, lxx, luu = ocp.running_cost(cfg, x, u, 0.0)
        for _ in range(4):
            k = int(rng.integers(0, 24))
            d = np.zeros(24)
            d[k] = h
            fx = (ocp.running_cost(cfg, x + d, u, 0.0)[0]
                  - ocp.running_cost(cfg, x - d, u, 0.0)[0]) / (2 * h)
            fu = (ocp.running_cost(cfg, x, u + d, 0.0)[0]
                  - ocp.running_cost(cfg, x, u - d, 0.0)[0]) / (2 * h)
            assert lx[k] == pytest.approx(fx, rel=1e-6, abs=1e-6)
            assert lu[k] == pytest.approx(fu, rel=1e-6, abs=1e-6)


def test_cost_yaw_error_wraps(setup):
    robot, terrain, x0 = setup
    cfg = ocp.CostConfig.from_weights(lambda t: x0, lambda t: np.zeros(24))
    x = x0.copy()
    x[2] = x0[2] + 2.0 * np.pi
    err = cfg.state_error(x, 0.0)
    assert err[2] == pytest.approx(0.0, abs=1e-12)


def test_cost_config_validation(setup):
    robot, terrain, x0 = setup
    with pytest.raises(ValueError):
        ocp.CostConfig(Q=-np.eye(24), R=np.eye(24), Qf=np.eye(24),
                       x_ref=lambda t: x0, u_ref=lambda t: np.zeros(24))
    with pytest.raises(ValueError):
        ocp.CostConfig(Q=np.eye(24), R=np.zeros((24, 24)), Qf=np.eye(24),
                       x_ref=lambda t: x0, u_ref=lambda t: np.zeros(24))


# --- Stance constraints -----------------------------------------------------

def test_stance_residual_zero_at_rest(setup):
    robot, terrain, x0 = setup
    u = gravity_comp(robot)
    for leg in range(4):
        r = ocp.stance_constraints(robot, terrain, x0, u, leg)
        assert np.allclose(r, 0.0, atol=1e-12)


def test_stance_residual_allows_pure_rolling(setup):
    # Torso moving straight forward: contact velocity along rolling only.
    robot, terrain, x0 = setup
    x = x0.copy()
    x[9] = 1.3
    u = np.zeros(24)
    for leg in range(4):
        r = ocp.stance_constraints(robot, terrain, x, u, leg)
        assert np.allclose(r, 0.0, atol=1e-12)


def test_stance_residual_projection_values(setup):
    # Build a state/input whose contact velocity is a known vector, then
    # check the lateral/normal projections directly.
    robot, terrain, x0 = setup
    x = x0.copy()
    x[9:12] = [0.1, 0.2, 0.05]
    u = np.zeros(24)
    r = ocp.stance_constraints(robot, terrain, x, u, 0)
    assert np.allclose(r, [0.2, 0.05], atol=1e-12)


# --- Swing constraints ------------------------------------------------------

def test_swing_residual_zero_when_tracking(setup):
    robot, terrain, x0 = setup
    swing = ocp.SwingProfile(apex_height=0.09)
    t_swing = 0.3
    phase = 0.25
    c_ref = swing.velocity(phase, t_swing)
    # Drive the torso vertically so the contact-normal velocity equals the
    # reference (joints at rest, wheel moves with the torso).
    x = x0.copy()
    x[11] = c_ref
    u = np.zeros(24)
    r = ocp.swing_constraints(robot, terrain, swing, x, u, 2, phase, t_swing)
    assert np.allclose(r, 0.0, atol=1e-12)


def test_swing_force_rows_pass_through(setup):
    robot, terrain, x0 = setup
    swing = ocp.SwingProfile()
    u = np.zeros(24)
    u[3] = 1.0  # RF x-force
    r = ocp.swing_constraints(robot, terrain, swing, x0, u, 1, 0.0, 0.3)
    assert r[0] == pytest.approx(1.0)


def test_swing_profile_shape():
    swing = ocp.SwingProfile(apex_height=0.09)
    t_swing = 0.3
    # Mid-swing vertical velocity vanishes at the apex.
    assert swing.velocity(0.5, t_swing) == pytest.approx(0.0, abs=1e-12)
    assert swing.height(0.5) == pytest.approx(0.09)
    assert swing.height(0.0) == pytest.approx(0.0)
    assert swing.height(1.0) == pytest.approx(0.0, abs=1e-12)
    # The velocity profile is the analytic derivative of the height.
    s = np.linspace(0, 1, 7)
    h = 1e-7
    fd = (swing.height(s + h) - swing.height(s - h)) / (2 * h) / t_swing
    assert np.allclose(swing.velocity(s, t_swing), fd, atol=1e-5)
    # and integrates to zero over the swing
    ss = np.linspace(0, 1, 10001)
    integral = np.trapezoid(swing.velocity(ss, t_swing), ss * t_swing)
    assert integral == pytest.approx(0.0, abs=1e-12)


# --- Friction cone ----------------------------------------------------------

def test_cone_pure_normal():
    terrain = m.Terrain(mu=0.7)
    h, _, _ = ocp.friction_cone(np.array([0.0, 0.0, 10.0]), terrain)
    assert h == pytest.approx(7.0 - 0.01, abs=1e-9)


def test_cone_boundary():
    terrain = m.Terrain(mu=1.0)
    h, _, _ = ocp.friction_cone(np.array([5.0, 0.0, 5.0]), terrain)
    assert h == pytest.approx(0.0, abs=2e-5)


def test_cone_violation():
    terrain = m.Terrain(mu=0.7)
    h, _, _ = ocp.friction_cone(np.array([3.0, 4.0, 5.0]), terrain)
    assert h == pytest.approx(0.7 * 5 - np.sqrt(25.0 + 1e-4), abs=1e-9)
    assert h < -1.49


def test_cone_derivatives_match_finite_differences():
    terrain = m.Terrain(mu=0.6)
    rng = np.random.default_rng(2)
    h_step = 1e-6
    for _ in range(20):
        lam = rng.uniform([-50, -50, 5], [50, 50, 300])
        _, grad, hess = ocp.friction_cone(lam, terrain)
        for k in range(3):
            d = np.zeros(3)
            d[k] = h_step
            gfd = (ocp.friction_cone(lam + d, terrain)[0]
                   - ocp.friction_cone(lam - d, terrain)[0]) / (2 * h_step)
            assert grad[k] == pytest.approx(gfd, rel=1e-5, abs=1e-7)
            hfd = (ocp.friction_cone(lam + d, terrain)[1]
                   - ocp.friction_cone(lam - d, terrain)[1]) / (2 * h_step)
            assert np.allclose(hess[:, k], hfd, rtol=1e-4, atol=1e-7)


def test_cone_concavity():
    # Midpoint value is at least the chord average on random segments.
    terrain = m.Terrain(mu=0.8)
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = rng.uniform([-100, -100, 0], [100, 100, 400])
        b = rng.uniform([-100, -100, 0], [100, 100, 400])
        ha = ocp.friction_cone(a, terrain)[0]
        hb = ocp.friction_cone(b, terrain)[0]
        hm = ocp.friction_cone(0.5 * (a + b), terrain)[0]
        assert hm >= 0.5 * (ha + hb) - 1e-12


def test_cone_tilted_terrain_frame():
    # The margin is evaluated in the surface frame, so a force along a
    # tilted normal has no tangential part.
    terrain = m.Terrain(normal=np.array([0.3, 0.1, 1.0]), mu=0.5)
    h, _, _ = ocp.friction_cone(terrain.normal * 10.0, terrain)
    assert h == pytest.approx(5.0 - 0.01, abs=1e-9)


# --- Assembly ---------------------------------------------------------------

def test_assemble_all_stance_counts(setup):
    robot, terrain, x0 = setup
    prob = make_problem(robot, terrain, x0, v_body=(0, 0, 0))
    for k in range(len(prob.times)):
        assert prob.constraint_counts(k) == (8, 4)


def test_assemble_mixed_counts_brute_force(setup):
    # Brute-force count over phases: 2 equality rows per stance leg, 4 per
    # swing leg, one cone row per stance leg.
    robot, terrain, x0 = setup
    prob = make_problem(robot, terrain, x0, v_body=(0, 0.35, 0))
    sched = prob.schedule
    seen_swing = False
    for k, t in enumerate(prob.times):
        flags = sched.flags_at(min(t, sched.t_end - 1e-9))
        n_stance = int(flags.sum())
        n_swing = 4 - n_stance
        seen_swing |= n_swing > 0
        assert prob.constraint_counts(k) == \
            (2 * n_stance + 4 * n_swing, n_stance)
        c, Gx, Gu = prob.equality(k, x0, np.zeros(24))
        assert c.shape[0] == 2 * n_stance + 4 * n_swing
        h, _, _, _ = prob.inequality(k, x0, gravity_comp(robot))
        assert h.shape[0] == n_stance
    assert seen_swing


def test_assemble_requires_covering_schedule(setup):
    robot, terrain, x0 = setup
    cfg = g.GaitConfig()
    legs = g.measured_leg_states(robot, terrain, x0, 0.0)
    ref = g.ReferenceTrajectory.from_velocity_profile(
        lambda t: np.zeros(3), lambda t: 0.0, 0.0, 1.0, cfg.dt_grid,
        start_position=(0, 0, x0[5]))
    sched = g.generate_gait(cfg, legs, None, ref, 0.4)
    cost = ocp.CostConfig.from_weights(lambda t: x0, lambda t: np.zeros(24))
    rt = DynamicsRuntime(robot, terrain)
    with pytest.raises(ValueError):
        ocp.assemble_ocp(robot, terrain, sched, cost, ocp.SwingProfile(),
                         x0, rt, times=make_time_grid(0.8, 0.015))


def test_equality_jacobians_match_finite_differences(setup):
    robot, terrain, x0 = setup
    prob = make_problem(robot, terrain, x0, v_body=(0, 0.35, 0))
    rng = np.random.default_rng(4)
    h = 1e-6
    for k in (0, 25, 40):
        x = x0 + 0.05 * rng.standard_normal(24)
        u = 30 * rng.standard_normal(24)
        c, Gx, Gu = prob.equality(k, x, u)

        def value(xx, uu):
            return prob.equality_value(k, xx, uu)[0]

        for j in range(24):
            d = np.zeros(24)
            d[j] = h
            fx = (value(x + d, u) - value(x - d, u)) / (2 * h)
            fu = (value(x, u + d) - value(x, u - d)) / (2 * h)
            assert np.allclose(Gx[:, j], fx, rtol=1e-5, atol=1e-6)
            assert np.allclose(Gu[:, j], fu, rtol=1e-5, atol=1e-6)


def test_projection_lands_on_constraints(setup):
    robot, terrain, x0 = setup
    prob = make_problem(robot, terrain, x0, v_body=(0, 0.35, 0))
    rng = np.random.default_rng(5)
    for k in (0, 20, 40):
        x = x0 + 0.05 * rng.standard_normal(24)
        u = 50 * rng.standard_normal(24)
        u_proj = prob.project_input(k, x, u)
        c, _ = prob.equality_value(k, x, u_proj)
        assert np.abs(c).max() < 1e-10


def test_gravity_comp_reference_is_equilibrium(setup):
    # The assembled u_ref makes the static all-stance reference an
    # equilibrium: the velocity rows of the dynamics vanish.
    robot, terrain, x0 = setup
    prob = make_problem(robot, terrain, x0, v_body=(0, 0, 0))
    u_ref = prob.u_ref_nodes[0]
    xd = m.srbd_derivative(robot, x0, u_ref, terrain)
    assert np.allclose(xd[6:12], 0.0, atol=1e-12)


def test_node_cached_cost_matches_direct(setup):
    robot, terrain, x0 = setup
    prob = make_problem(robot, terrain, x0)
    rng = np.random.default_rng(6)
    x = x0 + 0.1 * rng.standard_normal(24)
    u = 20 * rng.standard_normal(24)
    t = float(prob.times[7])
    direct = ocp.running_cost(prob.cost, x, u, t)
    cached = prob.cost.running(x, u, t)
    assert direct[0] == pytest.approx(cached[0])
