"""Finite-horizon optimal control problem for the wheeled quadruped.

Builds the tracking cost, the mode-dependent contact constraints and the
friction-cone inequality into a solver-ready problem bound to one contact
schedule. Stance legs keep lateral and normal contact-point velocity at
zero (rolling stays free); swing legs carry zero force and track a
predefined vertical velocity profile; stance forces stay inside a smoothed
friction cone.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import model as _model
from .model import (INPUT_DIM, N_LEGS, STATE_DIM, S_JOINTS, S_LINVEL,
                    S_OMEGA, S_THETA, U_JOINTVEL)
from .numerics import wrap_angle

CS_STEP = 1e-30


@dataclass
class CostConfig:
    """Quadratic tracking weights plus the reference providers.

    ``x_ref``/``u_ref`` map a time to the reference state and input.
    ``angle_indices`` lists state components whose error is wrapped to
    (-pi, pi] before weighting (the torso yaw for the quadruped).
    """

    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    x_ref: Callable[[float], np.ndarray]
    u_ref: Callable[[float], np.ndarray]
    angle_indices: tuple = ()

    def __post_init__(self):
        for M, name in ((self.Q, "Q"), (self.Qf, "Qf")):
            if np.any(np.linalg.eigvalsh(0.5 * (M + M.T)) < -1e-9):
                raise ValueError(f"{name} must be positive semi-definite")
        if np.any(np.linalg.eigvalsh(0.5 * (self.R + self.R.T)) <= 0):
            raise ValueError("R must be positive definite")

    @classmethod
    def from_weights(cls, x_ref, u_ref, w_orientation=100.0, w_position=200.0,
                     w_angular_rate=5.0, w_linear_velocity=10.0,
                     w_joint_position=2.0, w_force=1e-3,
                     w_joint_velocity=0.1, terminal_scale=10.0):
        q = np.concatenate([
            np.full(3, w_orientation), np.full(3, w_position),
            np.full(3, w_angular_rate), np.full(3, w_linear_velocity),
            np.full(12, w_joint_position)])
        r = np.concatenate([np.full(12, w_force), np.full(12, w_joint_velocity)])
        return cls(Q=np.diag(q), R=np.diag(r), Qf=terminal_scale * np.diag(q),
                   x_ref=x_ref, u_ref=u_ref, angle_indices=(2,))

    def state_error(self, x, t):
        err = np.asarray(x, dtype=float) - np.asarray(self.x_ref(t), dtype=float)
        for i in self.angle_indices:
            err[i] = wrap_angle(err[i])
        return err

    def running(self, x, u, t):
        return running_cost(self, x, u, t)

    def terminal(self, x, t):
        return terminal_cost(self, x, t)


def running_cost(cfg, x, u, t):
    """Instantaneous tracking cost with gradients and Hessian blocks.

    Returns (value, lx, lu, lxx, luu); the cross term is zero.
    """
    ex = cfg.state_error(x, t)
    eu = np.asarray(u, dtype=float) - cfg.u_ref(t)
    lx = cfg.Q @ ex
    lu = cfg.R @ eu
    value = 0.5 * float(ex @ lx) + 0.5 * float(eu @ lu)
    return value, lx, lu, cfg.Q, cfg.R


def terminal_cost(cfg, x, t):
    """Terminal tracking cost; returns (value, gx, gxx)."""
    ex = cfg.state_error(x, t)
    gx = cfg.Qf @ ex
    return 0.5 * float(ex @ gx), gx, cfg.Qf


@dataclass
class SwingProfile:
    """Vertical velocity reference for swing legs.

    The underlying height profile is apex * sin^2(pi s) over normalized
    phase s, so lift-off and touch-down heights and velocities are zero and
    the velocity integrates to zero over the swing.
    """

    apex_height: float = 0.09

    def height(self, s):
        return self.apex_height * np.sin(np.pi * s) ** 2

    def velocity(self, s, t_swing):
        """Vertical reference velocity at normalized phase s."""
        return self.apex_height * np.pi / t_swing * np.sin(2.0 * np.pi * s)


def _leg_velocity_terms(model, terrain, x, leg):
    """Per-leg direction rows and velocity pieces, complex-safe.

    Returns (v_free, row_lat, row_norm, Ju_lat, Ju_norm) where
    v_E = v_free + R J_q u_leg and the rows are the lateral/normal
    projections.
    """
    x = np.asarray(x)
    theta = x[..., S_THETA]
    omega = x[..., S_OMEGA]
    v = x[..., S_LINVEL]
    q_j = x[..., S_JOINTS]
    R = _model.rotation_world_body(theta)
    axle_b, axis_b, jac = _model._leg_geometry(model, q_j)
    a = axle_b[..., leg, :]
    v_free = np.einsum("...ij,...j->...i", R, v + np.cross(omega, a))
    RJ = np.einsum("...ij,...jk->...ik", R, jac[..., leg, :, :])
    n = terrain.normal
    axis_w = np.einsum("...ij,...j->...i", R, axis_b[..., leg, :])
    roll = np.cross(axis_w, n)
    roll = roll / np.sqrt(np.sum(roll * roll, axis=-1))[..., None]
    lat = np.cross(n, roll)
    return v_free, lat, n, RJ


def stance_constraints(model, terrain, x, u, leg):
    """Rolling-contact equality residuals: [lateral, normal] contact-point
    velocity; the rolling component stays unconstrained."""
    v_free, lat, n, RJ = _leg_velocity_terms(model, terrain, x, leg)
    u = np.asarray(u)
    u_leg = u[..., 12 + 3 * leg:15 + 3 * leg]
    v_e = v_free + np.einsum("...ik,...k->...i", RJ, u_leg)
    r_lat = np.sum(lat * v_e, axis=-1)
    r_norm = np.sum(n * v_e, axis=-1)
    return np.stack([r_lat, r_norm], axis=-1)


def swing_constraints(model, terrain, swing, x, u, leg, phase, t_swing):
    """Flight equality residuals: three zero-force rows plus the normal
    contact-point velocity tracking the swing profile."""
    v_free, lat, n, RJ = _leg_velocity_terms(model, terrain, x, leg)
    u = np.asarray(u)
    u_leg = u[..., 12 + 3 * leg:15 + 3 * leg]
    forces = u[..., 3 * leg:3 * leg + 3]
    v_e = v_free + np.einsum("...ik,...k->...i", RJ, u_leg)
    c_ref = swing.velocity(phase, t_swing)
    r_norm = np.sum(n * v_e, axis=-1) - c_ref
    return np.concatenate([forces, r_norm[..., None]], axis=-1)


def friction_cone(lam, terrain, eps=0.01):
    """Smoothed cone margin mu * F_n - sqrt(F_t1^2 + F_t2^2 + eps^2).

    ``lam`` is the world-frame contact force; it is projected onto the
    surface frame before evaluation. Returns (h, grad, hess) with
    derivatives taken w.r.t. the world-frame force. Feasible iff h >= 0.
    """
    lam = np.asarray(lam, dtype=float)
    t1, t2 = terrain.tangent_basis()
    n = terrain.normal
    f1, f2, fn = float(lam @ t1), float(lam @ t2), float(lam @ n)
    s = np.sqrt(f1 * f1 + f2 * f2 + eps * eps)
    h = terrain.mu * fn - s
    grad = terrain.mu * n - (f1 * t1 + f2 * t2) / s
    T = np.stack([t1, t2], axis=1)
    p = np.array([f1, f2])
    m2 = (np.eye(2) - np.outer(p, p) / s ** 2) / s
    hess = -T @ m2 @ T.T
    return h, grad, hess


@dataclass
class NodeConstraints:
    """Constraint bindings for one interval of the horizon."""

    stance_legs: tuple
    swing_legs: tuple          # (leg, phase) pairs
    u_ref: np.ndarray


class _NodeCachedCost:
    """CostConfig front that precomputes references at the grid times.

    The solver only ever evaluates the cost at node times, so interpolating
    the reference trajectory per call would be wasted work.
    """

    def __init__(self, cost, times, u_ref_nodes=None):
        self._cost = cost
        self.Q, self.R, self.Qf = cost.Q, cost.R, cost.Qf
        self.angle_indices = cost.angle_indices
        self._index = {float(t): k for k, t in enumerate(times)}
        self._x_ref = np.stack([np.asarray(cost.x_ref(t), dtype=float)
                                for t in times])
        if u_ref_nodes is not None:
            self._u_ref = np.asarray(u_ref_nodes, dtype=float)
        else:
            self._u_ref = np.stack([np.asarray(cost.u_ref(t), dtype=float)
                                    for t in times])

    def x_ref(self, t):
        k = self._index.get(float(t))
        return self._x_ref[k] if k is not None else self._cost.x_ref(t)

    def u_ref(self, t):
        k = self._index.get(float(t))
        return self._u_ref[k] if k is not None else self._cost.u_ref(t)

    def state_error(self, x, t):
        err = np.asarray(x, dtype=float) - self.x_ref(t)
        for i in self.angle_indices:
            err[i] = wrap_angle(err[i])
        return err

    def running(self, x, u, t):
        return running_cost(self, x, u, t)

    def terminal(self, x, t):
        return terminal_cost(self, x, t)


@dataclass
class OCProblem:
    """Solver-facing problem: dynamics, cost and per-node constraints.

    ``dynamics`` provides derivative/rk4_step/step_map_jacobians; equality
    and inequality callbacks are per-node closures. Immutable after
    assembly; every evaluator is pure.
    """

    times: np.ndarray
    x0: np.ndarray
    dynamics: object
    cost: CostConfig
    n_x: int = STATE_DIM
    n_u: int = INPUT_DIM
    equality: Optional[Callable] = None          # (k, x, u) -> (c, Gx, Gu)
    equality_value: Optional[Callable] = None    # (k, x, u) -> (c, Gu)
    inequality: Optional[Callable] = None        # (k, x, u) -> (h, hx, hu, huu)
    state_equality: Optional[Callable] = None    # (k, x) -> (c, Gx)
    u_ref_nodes: Optional[np.ndarray] = None
    schedule: object = None
    node_info: list = field(default_factory=list)

    @property
    def horizon(self):
        return float(self.times[-1] - self.times[0])

    def project_input(self, k, x, u):
        """Least-norm correction of ``u`` onto the node's equality set.

        All equality rows are affine in the input, so a single lstsq solve
        lands exactly on the constraint manifold.
        """
        if self.equality_value is None:
            return u
        c, Gu = self.equality_value(k, x, u)
        if c.size == 0:
            return u
        du = np.linalg.lstsq(Gu, -c, rcond=None)[0]
        return u + du

    def constraint_counts(self, k):
        info = self.node_info[k]
        n_eq = 2 * len(info.stance_legs) + 4 * len(info.swing_legs)
        return n_eq, len(info.stance_legs)


def _phase_of(schedule, leg, t, t_swing):
    window = schedule.swing_window(leg, t)
    if window is None:
        return 0.0
    return np.clip((t - window[0]) / t_swing, 0.0, 1.0)


def assemble_ocp(model, terrain, schedule, cost, swing, x0, dynamics,
                 times=None, swing_duration=0.3, cone_eps=0.01):
    """Bind cost and mode-dependent constraints to a contact schedule.

    Stance velocity rows and swing rows are state-input equalities, the
    friction cone per stance leg the inequality set. Every leg is covered
    by exactly one constraint family at every node.
    """
    if times is None:
        raise ValueError("a time grid is required")
    times = np.asarray(times, dtype=float)
    if (schedule.t_start > times[0] + 1e-9
            or schedule.t_end < times[-1] - 1e-9):
        raise ValueError("schedule does not cover the horizon")

    from .fastpath import _cone_rows_core, _contact_gu_core, _contact_rows_core

    n_nodes = len(times)
    node_info = []
    u_ref_nodes = np.zeros((n_nodes, INPUT_DIM))
    flags8 = np.zeros((n_nodes, N_LEGS), dtype=np.int8)
    crefs = np.zeros((n_nodes, N_LEGS))
    fk0 = _model.forward_kinematics(model, x0[S_THETA], x0[3:6],
                                    x0[S_JOINTS], terrain, check_limits=False)
    contact_rel = fk0.contact_rel_com
    for k, t in enumerate(times):
        flags = schedule.flags_at(min(t, schedule.t_end - 1e-9))
        stance = tuple(int(i) for i in range(N_LEGS) if flags[i])
        swings = tuple((int(i), float(_phase_of(schedule, i, t, swing_duration)))
                       for i in range(N_LEGS) if not flags[i])
        flags8[k] = flags.astype(np.int8)
        for leg, phase in swings:
            crefs[k, leg] = swing.velocity(phase, swing_duration)
        u_ref = np.zeros(INPUT_DIM)
        if stance:
            shares = _gravity_distribution(model, contact_rel, stance)
            for i, leg in enumerate(stance):
                u_ref[3 * leg:3 * leg + 3] = shares[i]
        u_ref_nodes[k] = u_ref
        node_info.append(NodeConstraints(stance, swings, u_ref))

    hips = np.ascontiguousarray(model.hip_offsets)
    l1, l2 = float(model.thigh_length), float(model.shank_length)
    normal = np.ascontiguousarray(terrain.normal)
    t1, t2 = terrain.tangent_basis()
    t1, t2 = np.ascontiguousarray(t1), np.ascontiguousarray(t2)
    # State channels the residuals can depend on (theta, omega, v, q_j).
    x_cols = np.r_[0:3, 6:12, 12:24]

    def equality(k, x, u):
        """Residual with both Jacobians: analytic in u, complex-step in x."""
        c = _contact_rows_core(x, u, flags8[k], crefs[k], hips, l1, l2, normal)
        m = c.shape[0]
        Gu = _contact_gu_core(x, flags8[k], hips, l1, l2, normal)
        Gx = np.zeros((m, STATE_DIM))
        xc = x.astype(complex)
        uc = u.astype(complex)
        for col in x_cols:
            xc[col] += 1j * CS_STEP
            Gx[:, col] = np.imag(_contact_rows_core(
                xc, uc, flags8[k], crefs[k], hips, l1, l2, normal)) / CS_STEP
            xc[col] = x[col]
        return c, Gx, Gu

    def equality_value(k, x, u):
        """Residual plus input Jacobian only (rollout projection path)."""
        c = _contact_rows_core(x, u, flags8[k], crefs[k], hips, l1, l2, normal)
        Gu = _contact_gu_core(x, flags8[k], hips, l1, l2, normal)
        return c, Gu

    def inequality(k, x, u):
        """Friction-cone margins for the stance legs at node k."""
        info = node_info[k]
        h, grad, hess = _cone_rows_core(u, flags8[k], t1, t2, normal,
                                        terrain.mu, cone_eps)
        m = len(info.stance_legs)
        hx = np.zeros((m, STATE_DIM))
        hu = np.zeros((m, INPUT_DIM))
        huu = np.zeros((m, INPUT_DIM, INPUT_DIM))
        for i, leg in enumerate(info.stance_legs):
            hu[i, 3 * leg:3 * leg + 3] = grad[i]
            huu[i, 3 * leg:3 * leg + 3, 3 * leg:3 * leg + 3] = hess[i]
        return h, hx, hu, huu

    cached_cost = _NodeCachedCost(cost, times, u_ref_nodes=u_ref_nodes)
    return OCProblem(times=times, x0=np.asarray(x0, dtype=float),
                     dynamics=dynamics, cost=cached_cost,
                     equality=equality, equality_value=equality_value,
                     inequality=inequality, u_ref_nodes=u_ref_nodes,
                     schedule=schedule, node_info=node_info)
