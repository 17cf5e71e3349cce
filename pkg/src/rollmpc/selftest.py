"""Fast numerical self-checks runnable from the CLI.

Each check pits an implementation against an independent oracle: finite
differences for the analytic derivatives, the algebraic Riccati equation
for the backward pass, closed forms for the gait trigger and barrier
junction. A fault-injection hook exists so the harness itself can be
shown to catch a perturbed model.
"""

import numpy as np
from scipy.linalg import expm, solve_discrete_are

from . import gait, model, ocp, solver


def check_dynamics_derivatives(gravity_scale=1.0):
    """Analytic Jacobians against central finite differences."""
    rm = model.RobotModel(gravity=9.81 * gravity_scale)
    rm_true = model.RobotModel()
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(20):
        x = rm.nominal_state() + 0.15 * rng.standard_normal(24)
        u = 40.0 * rng.standard_normal(24)
        A, B = model.srbd_linearization(rm, x, u)
        for _ in range(4):
            k = rng.integers(0, 24)
            d = np.zeros(24)
            d[k] = h
            fd = (model.srbd_derivative(rm_true, x + d, u)
                  - model.srbd_derivative(rm_true, x - d, u)) / (2 * h)
            scale = np.maximum(np.abs(fd), 1.0)
            if np.any(np.abs(A[:, k] - fd) / scale > 1e-5):
                return False, f"state column {k} mismatch"
    return True, "analytic vs finite differences agree"


def check_riccati_gain():
    """Backward pass converges to the algebraic-Riccati gain."""
    A_c = np.array([[0.0, 1.0], [0.0, 0.0]])
    B_c = np.array([[0.0], [1.0]])
    dt = 0.01
    M = np.zeros((3, 3))
    M[:2, :2] = A_c
    M[:2, 2:] = B_c
    E = expm(M * dt)
    Ad, Bd = E[:2, :2], E[:2, 2:]
    Q = np.diag([1.0, 0.1]) * dt
    R = np.array([[0.5]]) * dt
    P = solve_discrete_are(Ad, Bd, Q, R)
    K_are = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)

    n = 2000
    lq = (np.tile(Ad, (n, 1, 1)), np.tile(Bd, (n, 1, 1)),
          np.zeros((n, 2)), np.zeros((n, 1)),
          np.tile(Q, (n, 1, 1)), np.tile(R, (n, 1, 1)),
          [(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 1)))] * n,
          np.zeros(2), Q.copy())
    k_dir, K, _ = solver.backward_pass(lq, solver.SolverSettings())
    err = np.abs(-K[0] - K_are).max()
    return err < 1e-6, f"gain error {err:.2e}"


def check_gait_trigger():
    """First swing time against the closed-form utility crossing."""
    cfg = gait.GaitConfig()
    rm = model.RobotModel()
    terrain = model.Terrain()
    x0 = rm.nominal_state()
    v_lat = 0.3
    ref = gait.ReferenceTrajectory.from_velocity_profile(
        lambda t: np.array([0.0, v_lat, 0.0]), lambda t: 0.0,
        0.0, 2.0, cfg.dt_grid, start_position=(0, 0, x0[5]))
    legs = gait.measured_leg_states(rm, terrain, x0, 0.0)
    sched = gait.generate_gait(cfg, legs, None, ref, 1.5)
    if sched.contact_flags.all():
        return False, "no swing triggered"
    t_star = float(sched.event_times[0])
    expected = (1.0 - cfg.u_bar) * cfg.lambda_perp / v_lat
    ok = abs(t_star - expected) <= cfg.dt_grid + 1e-9
    return ok, f"first swing {t_star:.3f} s vs closed form {expected:.3f} s"


def check_barrier_junction():
    """Relaxed-barrier value and first two derivatives are continuous."""
    mu, delta = 0.8, 0.13
    eps = 1e-7
    above = solver.relaxed_barrier(np.array([delta + eps]), mu, delta)
    below = solver.relaxed_barrier(np.array([delta - eps]), mu, delta)
    gaps = [abs(a[0] - b[0]) for a, b in zip(above, below)]
    ok = gaps[0] < 1e-5 and gaps[1] < 1e-4 and gaps[2] < 1e-2
    return ok, f"junction gaps {gaps[0]:.1e}/{gaps[1]:.1e}/{gaps[2]:.1e}"


def check_cone_examples():
    terrain = model.Terrain(mu=0.7)
    h, _, _ = ocp.friction_cone(np.array([0.0, 0.0, 10.0]), terrain)
    if abs(h - (7.0 - 0.01)) > 1e-9:
        return False, "pure normal force margin wrong"
    h, _, _ = ocp.friction_cone(np.array([3.0, 4.0, 5.0]), terrain)
    if abs(h - (3.5 - np.sqrt(25.0 + 1e-4))) > 1e-9:
        return False, "violated-force margin wrong"
    return True, "cone margins match direct evaluation"


CHECKS = [
    ("dynamics_derivatives", check_dynamics_derivatives),
    ("riccati_gain", check_riccati_gain),
    ("gait_trigger", check_gait_trigger),
    ("barrier_junction", check_barrier_junction),
    ("cone_examples", check_cone_examples),
]


def run_selftest(checks=None, stream=None):
    """Run every registered check; prints one pass/fail line per property.

    Returns True only if the registry is non-empty and everything passed.
    """
    import sys

    stream = stream or sys.stdout
    checks = CHECKS if checks is None else checks
    if not checks:
        print("selftest registry is empty", file=stream)
        return False
    all_ok = True
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", file=stream)
    return all_ok
