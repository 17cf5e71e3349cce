import numpy as np
import pytest
from scipy.linalg import expm, solve_discrete_are

from rollmpc import gait as g
from rollmpc import model as m
from rollmpc import ocp
from rollmpc import solver as sv
from rollmpc.fastpath import DynamicsRuntime
from rollmpc.numerics import make_time_grid


def zoh_discretize(A, B, dt):
    n, k = A.shape[0], B.shape[1]
    M = np.zeros((n + k, n + k))
    M[:n, :n] = A
    M[:n, n:] = B
    E = expm(M * dt)
    return E[:n, :n], E[:n, n:]


def linear_dynamics(A, B):
    def f(x, u):
        return x @ A.T + u @ B.T if np.ndim(x) > 1 else A @ x + B @ u

    return sv.GenericDynamics(f)


def lqr_problem(T=2.0, dt=0.015):
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    Q = np.diag([2.0, 0.5])
    R = np.array([[0.4]])
    Qf = np.diag([4.0, 1.0])
    x0 = np.array([1.0, -0.5])
    times = make_time_grid(T, dt)
    cost = ocp.CostConfig(Q=Q, R=R, Qf=Qf, x_ref=lambda t: np.zeros(2),
                          u_ref=lambda t: np.zeros(1))
    prob = ocp.OCProblem(times=times, x0=x0, dynamics=linear_dynamics(A, B),
                         cost=cost, n_x=2, n_u=1)
    return prob, (A, B, Q, R, Qf, x0, times)


def riccati_cost(A, B, Q, R, Qf, x0, times):
    """Discrete time-varying Riccati oracle with exact ZOH discretization."""
    S = Qf.copy()
    for k in range(len(times) - 2, -1, -1):
        dt = times[k + 1] - times[k]
        Ad, Bd = zoh_discretize(A, B, dt)
        Qk, Rk = Q * dt, R * dt
        K = np.linalg.solve(Rk + Bd.T @ S @ Bd, Bd.T @ S @ Ad)
        S = Qk + Ad.T @ S @ (Ad - Bd @ K)
        S = 0.5 * (S + S.T)
    return 0.5 * float(x0 @ S @ x0)


# --- Barrier ---------------------------------------------------------------

def test_barrier_c2_junction():
    # Value, slope and curvature agree across the junction: the symmetric
    # differences through it match the one-sided derivatives.
    mu, delta = 0.7, 0.3
    eps = 1e-6
    v_up, g_up, h_up = sv.relaxed_barrier(np.array([delta + eps]), mu, delta)
    v_dn, g_dn, h_dn = sv.relaxed_barrier(np.array([delta - eps]), mu, delta)
    v_at, g_at, h_at = sv.relaxed_barrier(np.array([delta]), mu, delta)
    assert (v_up[0] - v_dn[0]) / (2 * eps) == pytest.approx(g_at[0], rel=1e-5)
    assert (g_up[0] - g_dn[0]) / (2 * eps) == pytest.approx(h_at[0], rel=1e-4)
    assert (v_up[0] + v_dn[0] - 2 * v_at[0]) / eps ** 2 == pytest.approx(
        h_at[0], rel=1e-2)


def test_barrier_gradient_vanishes_far_away():
    _, grad, _ = sv.relaxed_barrier(np.array([1e6]), 1.0, 0.1)
    assert abs(grad[0]) < 1e-5


def test_barrier_finite_below_zero():
    val, grad, hess = sv.relaxed_barrier(np.array([-2.0]), 1.0, 0.1)
    assert np.isfinite(val).all() and np.isfinite(grad).all()
    assert hess[0] > 0


# --- Rollout ---------------------------------------------------------------

def test_rollout_zero_dynamics_holds_state():
    times = make_time_grid(1.0, 0.1)
    dyn = sv.GenericDynamics(lambda x, u: np.zeros_like(x))
    cost = ocp.CostConfig(Q=np.eye(2), R=np.eye(1), Qf=np.eye(2),
                          x_ref=lambda t: np.zeros(2),
                          u_ref=lambda t: np.zeros(1))
    prob = ocp.OCProblem(times=times, x0=np.array([0.3, -0.7]), dynamics=dyn,
                         cost=cost, n_x=2, n_u=1)
    policy = sv.LinearPolicy.constant_input(times, np.zeros((len(times), 1)),
                                            prob.x0)
    xs, us = sv.rollout(prob, policy, prob.x0, sv.SolverSettings())
    assert np.allclose(xs, prob.x0)
    assert np.allclose(us, 0.0)


def test_rollout_linear_system_matches_matrix_exponential():
    A = np.array([[-0.3, 1.2], [-1.2, -0.3]])
    B = np.array([[0.0], [1.0]])
    u_const = np.array([0.7])
    times = make_time_grid(1.5, 0.015)
    cost = ocp.CostConfig(Q=np.eye(2), R=np.eye(1), Qf=np.eye(2),
                          x_ref=lambda t: np.zeros(2),
                          u_ref=lambda t: np.zeros(1))
    prob = ocp.OCProblem(times=times, x0=np.array([1.0, 0.0]),
                         dynamics=linear_dynamics(A, B), cost=cost,
                         n_x=2, n_u=1)
    policy = sv.LinearPolicy.constant_input(
        times, np.tile(u_const, (len(times), 1)), prob.x0)
    xs, _ = sv.rollout(prob, policy, prob.x0, sv.SolverSettings())
    Ad, Bd = zoh_discretize(A, B, times[-1] - times[-2])
    x = prob.x0.copy()
    for k in range(len(times) - 1):
        Ad, Bd = zoh_discretize(A, B, times[k + 1] - times[k])
        x = Ad @ x + Bd @ u_const
    assert np.allclose(xs[-1], x, atol=1e-6)


def test_rollout_quadruped_equilibrium_is_stationary():
    robot = m.RobotModel()
    terrain = m.Terrain()
    x0 = robot.nominal_state()
    cfg = g.GaitConfig()
    legs = g.measured_leg_states(robot, terrain, x0, 0.0)
    ref = g.ReferenceTrajectory.from_velocity_profile(
        lambda t: np.zeros(3), lambda t: 0.0, 0.0, 1.5, cfg.dt_grid,
        start_position=(0, 0, x0[5]))
    sched = g.generate_gait(cfg, legs, None, ref, 0.8)
    cost = ocp.CostConfig.from_weights(lambda t: x0, lambda t: np.zeros(24))
    rt = DynamicsRuntime(robot, terrain)
    prob = ocp.assemble_ocp(robot, terrain, sched, cost, ocp.SwingProfile(),
                            x0, rt, times=make_time_grid(0.8, 0.015))
    policy = sv.LinearPolicy.constant_input(prob.times, prob.u_ref_nodes, x0)
    xs, _ = sv.rollout(prob, policy, x0, sv.SolverSettings())
    assert np.abs(xs - x0).max() < 1e-9


def test_rollout_divergence_guard():
    times = make_time_grid(1.0, 0.05)
    dyn = sv.GenericDynamics(lambda x, u: 100.0 * x)
    cost = ocp.CostConfig(Q=np.eye(1), R=np.eye(1), Qf=np.eye(1),
                          x_ref=lambda t: np.zeros(1),
                          u_ref=lambda t: np.zeros(1))
    prob = ocp.OCProblem(times=times, x0=np.array([1.0]), dynamics=dyn,
                         cost=cost, n_x=1, n_u=1)
    policy = sv.LinearPolicy.constant_input(times, np.zeros((len(times), 1)),
                                            prob.x0)
    with pytest.raises(sv.RolloutDivergenceError):
        sv.rollout(prob, policy, prob.x0, sv.SolverSettings())


# --- LQ approximation -------------------------------------------------------

def test_lq_jacobians_match_finite_differences_quadruped():
    robot = m.RobotModel()
    terrain = m.Terrain()
    rt = DynamicsRuntime(robot, terrain)
    rng = np.random.default_rng(0)
    x = robot.nominal_state() + 0.1 * rng.standard_normal(24)
    u = 30 * rng.standard_normal(24)
    dt = 0.015
    A, B = rt.step_map_jacobians(x[None, :], u[None, :], np.array([dt]))
    h = 1e-6
    for k in range(0, 24, 5):
        d = np.zeros(24)
        d[k] = h
        fa = (rt.rk4_step(x + d, u, dt) - rt.rk4_step(x - d, u, dt)) / (2 * h)
        fb = (rt.rk4_step(x, u + d, dt) - rt.rk4_step(x, u - d, dt)) / (2 * h)
        assert np.allclose(A[0][:, k], fa, rtol=1e-5, atol=1e-8)
        assert np.allclose(B[0][:, k], fb, rtol=1e-5, atol=1e-8)


def test_lq_barrier_terms_inactive_far_from_cone():
    # With huge margins the barrier contributes nearly nothing.
    prob, (A, B, Q, R, Qf, x0, times) = lqr_problem(T=0.2)

    def ineq(k, x, u):
        return (np.array([1e9]), np.zeros((1, 2)), np.zeros((1, 1)),
                np.zeros((1, 1, 1)))

    prob.inequality = ineq
    xs = np.tile(x0, (len(times), 1))
    us = np.zeros((len(times) - 1, 1))
    lq = sv.lq_approximation(prob, xs, us, sv.SolverSettings())
    _, _, q, r, _, _, _, _, _ = lq
    assert np.abs(r).max() < 1e-6


# --- Backward pass ----------------------------------------------------------

def test_backward_pass_converges_to_algebraic_riccati():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    dt = 0.015
    Ad, Bd = zoh_discretize(A, B, dt)
    Q = np.diag([1.0, 0.3]) * dt
    R = np.array([[0.2]]) * dt
    n = 3000
    lq = (np.tile(Ad, (n, 1, 1)), np.tile(Bd, (n, 1, 1)),
          np.zeros((n, 2)), np.zeros((n, 1)),
          np.tile(Q, (n, 1, 1)), np.tile(R, (n, 1, 1)),
          [(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 1)))] * n,
          np.zeros(2), Q.copy())
    k_dir, K, _ = sv.backward_pass(lq, sv.SolverSettings())
    P = solve_discrete_are(Ad, Bd, Q, R)
    K_are = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    assert np.allclose(-K[0], K_are, atol=1e-6)
    assert np.allclose(k_dir[0], 0.0)


def test_backward_pass_zero_b_gives_zero_policy():
    n = 50
    A = np.tile(np.eye(2), (n, 1, 1))
    B = np.zeros((n, 2, 1))
    lq = (A, B, np.zeros((n, 2)), np.zeros((n, 1)),
          np.tile(np.eye(2), (n, 1, 1)), np.tile(np.eye(1), (n, 1, 1)),
          [(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 1)))] * n,
          np.zeros(2), np.eye(2))
    k_dir, K, _ = sv.backward_pass(lq, sv.SolverSettings())
    assert np.allclose(k_dir, 0.0)
    assert np.allclose(K, 0.0)


def test_backward_pass_equality_projection_respects_rows():
    # A single equality row u0 = 0.3 must be honored by the policy.
    n = 10
    Ad = np.tile(np.eye(2), (n, 1, 1))
    Bd = np.tile(np.array([[1.0, 0.0], [0.0, 1.0]]), (n, 1, 1))
    eq = [(np.array([-0.3]), np.zeros((1, 2)), np.array([[1.0, 0.0]]))] * n
    lq = (Ad, Bd, np.zeros((n, 2)), np.zeros((n, 2)),
          np.tile(np.eye(2), (n, 1, 1)), np.tile(np.eye(2), (n, 1, 1)),
          eq, np.zeros(2), np.eye(2))
    k_dir, K, _ = sv.backward_pass(lq, sv.SolverSettings())
    # Feedforward satisfies G_u du = -c and feedback stays in its null space.
    assert k_dir[0][0] == pytest.approx(0.3)
    assert np.allclose(K[0][0, :], 0.0, atol=1e-12)


def test_regularization_error_on_hopeless_hessian():
    n = 3
    Ad = np.tile(np.eye(1), (n, 1, 1))
    Bd = np.tile(np.eye(1), (n, 1, 1))
    lq = (Ad, Bd, np.zeros((n, 1)), np.zeros((n, 1)),
          np.tile(np.eye(1), (n, 1, 1)),
          np.tile(np.array([[-1e12]]), (n, 1, 1)),
          [(np.zeros(0), np.zeros((0, 1)), np.zeros((0, 1)))] * n,
          np.zeros(1), np.eye(1))
    with pytest.raises(sv.RegularizationError):
        sv.backward_pass(lq, sv.SolverSettings(reg_max=1.0))


# --- slq_solve ---------------------------------------------------------------

def test_slq_matches_riccati_on_lqr():
    prob, params = lqr_problem()
    res = sv.slq_solve(prob, settings=sv.SolverSettings())
    want = riccati_cost(*params)
    assert res.converged
    assert len(res.iterations) - 1 <= 2
    assert res.cost == pytest.approx(want, rel=1e-6)


def test_slq_already_optimal_keeps_cost():
    # Start on the reference at an equilibrium input: no improvement step
    # is accepted and the cost is unchanged.
    A = np.zeros((2, 2))
    B = np.array([[1.0, 0.0], [0.0, 1.0]])
    times = make_time_grid(0.5, 0.05)
    cost = ocp.CostConfig(Q=np.eye(2), R=np.eye(2), Qf=np.eye(2),
                          x_ref=lambda t: np.zeros(2),
                          u_ref=lambda t: np.zeros(2))
    prob = ocp.OCProblem(times=times, x0=np.zeros(2),
                         dynamics=linear_dynamics(A, B), cost=cost,
                         n_x=2, n_u=2)
    res = sv.slq_solve(prob, settings=sv.SolverSettings())
    assert res.converged
    assert res.cost == pytest.approx(0.0, abs=1e-15)
    assert max(it.step_size for it in res.iterations) == 0.0


def test_slq_merit_never_increases():
    prob, _ = lqr_problem(T=1.0)
    res = sv.slq_solve(prob, settings=sv.SolverSettings())
    merits = [it.merit for it in res.iterations]
    assert all(b <= a + 1e-12 for a, b in zip(merits, merits[1:]))


def test_slq_constrained_toy_matches_brute_force():
    # 1D point mass, input lower bound, 3 nodes: the relaxed-barrier
    # solution approaches the brute-force constrained optimum as the
    # barrier tightens, monotonically across three levels.
    u_lim = 1.0
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    times = np.linspace(0.0, 1.0, 3)
    x0 = np.array([0.0, 0.5])
    x_goal = np.array([0.0, -0.7])
    Q = np.zeros((2, 2))
    R = np.array([[0.05]])
    Qf = np.diag([0.0, 10.0])
    cost = ocp.CostConfig(Q=Q, R=R, Qf=Qf, x_ref=lambda t: x_goal,
                          u_ref=lambda t: np.zeros(1))

    def ineq(k, x, u):
        return (np.array([u_lim + u[0]]), np.zeros((1, 2)),
                np.array([[1.0]]), np.zeros((1, 1, 1)))

    prob = ocp.OCProblem(times=times, x0=x0, dynamics=linear_dynamics(A, B),
                         cost=cost, n_x=2, n_u=1, inequality=ineq)

    # Brute force: dense grid over the two inputs with exact discretization.
    Ad, Bd = zoh_discretize(A, B, 0.5)
    uu = np.linspace(-u_lim, u_lim, 4001)
    U0, U1 = np.meshgrid(uu, uu, indexing="ij")
    X1 = (Ad @ x0)[:, None, None] + Bd[:, 0][:, None, None] * U0
    X2 = np.einsum("ij,jkl->ikl", Ad, X1) + Bd[:, 0][:, None, None] * U1
    J = (0.5 * R[0, 0] * (U0 ** 2 + U1 ** 2) * 0.5
         + 0.5 * Qf[1, 1] * (X2[1] - x_goal[1]) ** 2)
    j_brute = J.min()

    def true_cost(res):
        c = sum(0.5 * R[0, 0] * res.u_nom[k][0] ** 2 * 0.5 for k in range(2))
        return c + 0.5 * Qf[1, 1] * (res.x_nom[-1][1] - x_goal[1]) ** 2

    gaps = []
    for mu_b, delta_b in [(0.5, 0.3), (0.05, 0.05), (0.002, 0.002)]:
        st = sv.SolverSettings(mu_barrier=mu_b, delta_barrier=delta_b,
                               max_iterations=120, tolerance=1e-12)
        res = sv.slq_solve(prob, settings=st)
        gaps.append((true_cost(res) - j_brute) / j_brute)
    assert gaps[0] >= gaps[1] >= gaps[2] >= -1e-9
    assert gaps[2] < 0.02


def test_state_equality_penalty_path():
    # Synthetic state-only equality x1(t) = 0.4 handled by the quadratic
    # penalty: the solution drives the residual small.
    A = np.zeros((1, 1))
    B = np.eye(1)
    times = make_time_grid(1.0, 0.05)
    cost = ocp.CostConfig(Q=np.zeros((1, 1)), R=1e-4 * np.eye(1),
                          Qf=np.zeros((1, 1)),
                          x_ref=lambda t: np.zeros(1),
                          u_ref=lambda t: np.zeros(1))

    def state_eq(k, x):
        return np.array([x[0] - 0.4]), np.array([[1.0]])

    prob = ocp.OCProblem(times=times, x0=np.array([0.0]),
                         dynamics=linear_dynamics(A, B), cost=cost,
                         n_x=1, n_u=1, state_equality=state_eq)
    st = sv.SolverSettings(eq_penalty=1e4, max_iterations=60,
                           tolerance=1e-12)
    res = sv.slq_solve(prob, settings=st)
    # After a short transient the state sits on the constraint.
    assert abs(res.x_nom[-1][0] - 0.4) < 1e-2


# --- Policy type ------------------------------------------------------------

def test_policy_interpolation_contract():
    times = np.array([0.0, 0.1, 0.2])
    x_nom = np.array([[0.0], [1.0], [2.0]])
    u_nom = np.array([[1.0], [3.0]])
    K = np.zeros((2, 1, 1))
    pol = sv.LinearPolicy(times=times, x_nom=x_nom, u_nom=u_nom, K=K)
    # piecewise-linear feedforward between nodes
    assert pol.evaluate(0.05, np.zeros(1))[0] == pytest.approx(2.0)
    # zero-order-hold gain
    K2 = K.copy()
    K2[0, 0, 0] = 2.0
    pol2 = sv.LinearPolicy(times=times, x_nom=x_nom, u_nom=u_nom, K=K2)
    out = pol2.evaluate(0.05, np.array([1.5]))
    assert out[0] == pytest.approx(2.0 + 2.0 * (1.5 - 0.5))


def test_policy_resample_shift():
    times = np.linspace(0.0, 1.0, 11)
    x_nom = np.linspace(0.0, 1.0, 11)[:, None]
    u_nom = np.arange(10.0)[:, None]
    K = np.zeros((10, 1, 1))
    pol = sv.LinearPolicy(times=times, x_nom=x_nom, u_nom=u_nom, K=K)
    shifted = pol.resampled(times + 0.35)
    assert shifted.u_nom[0][0] == pytest.approx(3.0)
    # beyond the original grid the terminal values repeat
    assert shifted.u_nom[-1][0] == pytest.approx(9.0)
    assert shifted.x_nom[-1][0] == pytest.approx(1.0)


def test_policy_rejects_nonfinite_gains():
    with pytest.raises(ValueError):
        sv.LinearPolicy(times=np.array([0.0, 0.1]),
                        x_nom=np.zeros((2, 1)), u_nom=np.zeros((1, 1)),
                        K=np.full((1, 1, 1), np.nan))


# --- mpc_step ----------------------------------------------------------------

@pytest.fixture(scope="module")
def quad_mpc():
    robot = m.RobotModel()
    terrain = m.Terrain()
    x0 = robot.nominal_state()
    rt = DynamicsRuntime(robot, terrain)
    rt.warm_up()
    cfg = g.GaitConfig()
    ref = g.ReferenceTrajectory.from_velocity_profile(
        lambda t: np.zeros(3), lambda t: 0.0, 0.0, 4.0, cfg.dt_grid,
        start_position=(0, 0, x0[5]))
    cost = ocp.CostConfig.from_weights(
        lambda t: x0,
        lambda t: np.repeat([[0, 0, robot.mass * robot.gravity / 4]],
                            4, axis=0).reshape(-1).tolist() + [0.0] * 0)
    # u_ref as flat 24-vector
    u_ref = np.zeros(24)
    for leg in range(4):
        u_ref[3 * leg + 2] = robot.mass * robot.gravity / 4
    cost = ocp.CostConfig.from_weights(lambda t: x0, lambda t: u_ref)

    def factory(x, t):
        legs = g.measured_leg_states(robot, terrain, x, t)
        sched = g.generate_gait(cfg, legs, None, ref, 0.8, t_now=t)
        return ocp.assemble_ocp(robot, terrain, sched, cost,
                                ocp.SwingProfile(), x, rt,
                                times=t + make_time_grid(0.8, 0.015))

    return robot, x0, factory


def test_mpc_step_stationary_fixed_point(quad_mpc):
    robot, x0, factory = quad_mpc
    st = sv.SolverSettings()
    res, prob = sv.mpc_step(factory, x0, 0.0, settings=st)
    costs = [res.cost]
    for i in range(1, 4):
        res, prob = sv.mpc_step(factory, x0, 0.03 * i, previous=res,
                                settings=st)
        costs.append(res.cost)
    assert abs(costs[-1] - costs[-2]) < 1e-6
    assert costs[-1] < 1e-6


def test_mpc_step_settles_after_reference_step(quad_mpc):
    robot, x0, factory = quad_mpc
    st = sv.SolverSettings()
    # Perturb the initial state; successive solves shrink the cost.
    x = x0.copy()
    x[3] += 0.1
    res, prob = sv.mpc_step(factory, x, 0.0, settings=st)
    first = res.cost
    # march the plant under the policy for a few cycles
    rt = prob.dynamics
    for i in range(1, 6):
        for node in range(2):
            k = 2 * 0 + node
            u = res.policy.node_input(node, x)
            u = prob.project_input(node, x, u)
            x = rt.rk4_step(x, u, 0.015)
        res, prob = sv.mpc_step(factory, x, 0.03 * i, previous=res,
                                settings=st)
    assert res.cost < first


def test_policy_feedback_directional_derivative(quad_mpc):
    # Perturbing x0 changes the optimal initial input by K(0) delta to
    # first order.
    robot, x0, factory = quad_mpc
    st = sv.SolverSettings(max_iterations=40, tolerance=1e-10)
    prob = factory(x0, 0.0)
    res = sv.slq_solve(prob, settings=st)
    delta = np.zeros(24)
    delta[3] = 1e-4
    res2 = sv.slq_solve(prob, x0=x0 + delta,
                        warm_start=res.policy, settings=st)
    du_actual = res2.u_nom[0] - res.u_nom[0]
    du_predicted = res.policy.K[0] @ delta
    # Compare the dominant force components directionally.
    scale = max(np.abs(du_actual).max(), 1e-9)
    assert np.abs(du_actual - du_predicted).max() / scale < 0.25
