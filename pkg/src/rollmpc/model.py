"""Kinodynamic model of a wheeled quadruped.

The torso is a single rigid body; each of the four legs has three revolute
joints (hip abduction about x, hip flexion and knee flexion about y) and a
non-steerable wheel at the shank end. Wheels are treated as locked joints:
the contact is a moving point at wheel-radius distance below the axle along
the terrain normal.

State vector (24):   theta (roll, pitch, yaw) | p world | omega body | v body | q_j (12)
Input vector (24):   contact forces, world, 4 legs x 3     | joint velocities (12)

Rotations compose as Rz(yaw) @ Ry(pitch) @ Rx(roll) (Z-Y-X convention).
Angular rate and linear velocity of the COM are expressed in the torso
frame; the COM is taken at the torso-frame origin. All units SI.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import complex_step_jacobian

N_LEGS = 4
N_JOINTS = 12
STATE_DIM = 12 + N_JOINTS
INPUT_DIM = 3 * N_LEGS + N_JOINTS

LEG_NAMES = ("LF", "RF", "LH", "RH")
# Adjacency used by the gait rules: lateral and longitudinal pairs are
# neighbors, diagonal pairs are not.
LEG_NEIGHBORS = {0: (1, 2), 1: (0, 3), 2: (0, 3), 3: (1, 2)}
DIAGONAL_PARTNER = {0: 3, 1: 2, 2: 1, 3: 0}

GRAVITY = 9.81

# State layout
S_THETA = slice(0, 3)
S_POS = slice(3, 6)
S_OMEGA = slice(6, 9)
S_LINVEL = slice(9, 12)
S_JOINTS = slice(12, 24)
# Input layout
U_FORCES = slice(0, 12)
U_JOINTVEL = slice(12, 24)


class EulerSingularityError(ValueError):
    """Pitch too close to +-pi/2 for the Euler-rate map to be well defined."""


class JointLimitError(ValueError):
    """Joint configuration outside the limits declared in the model."""


@dataclass
class State:
    """Torso pose/twist plus joint positions. Thin view over the flat vector."""

    theta: np.ndarray
    p: np.ndarray
    omega: np.ndarray
    v: np.ndarray
    q_j: np.ndarray

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[S_THETA].copy(), x[S_POS].copy(), x[S_OMEGA].copy(),
                   x[S_LINVEL].copy(), x[S_JOINTS].copy())

    def as_vector(self):
        return np.concatenate([self.theta, self.p, self.omega, self.v, self.q_j])


@dataclass
class ControlInput:
    """Per-leg world-frame contact forces and joint velocities."""

    forces: np.ndarray          # (4, 3)
    joint_velocities: np.ndarray  # (12,)

    @classmethod
    def from_vector(cls, u):
        u = np.asarray(u, dtype=float)
        return cls(u[U_FORCES].reshape(N_LEGS, 3).copy(), u[U_JOINTVEL].copy())

    def as_vector(self):
        return np.concatenate([self.forces.reshape(-1), self.joint_velocities])


@dataclass
class Terrain:
    """Single plane: unit normal, friction coefficient, height offset."""

    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    mu: float = 0.7
    offset: float = 0.0

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float)
        n = np.linalg.norm(self.normal)
        if not n > 0:
            raise ValueError("terrain normal must be nonzero")
        self.normal = self.normal / n
        if self.mu <= 0:
            raise ValueError("friction coefficient must be positive")

    def tangent_basis(self):
        """Two unit tangents completing a right-handed frame with the normal."""
        n = self.normal
        ref = np.array([1.0, 0.0, 0.0])
        if abs(n[0]) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        t1 = np.cross(ref, n)
        t1 = t1 / np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        return t1, t2


@dataclass
class RobotModel:
    """Masses, inertia and kinematic-tree parameters of the robot.

    Hip offsets follow the leg order LF, RF, LH, RH. Each leg chain is
    hip-abduction (x axis), hip-flexion (y), knee-flexion (y), with the
    wheel axle at the shank end and the wheel axis along the final y axis.
    """

    mass: float = 50.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.9, 1.9, 2.1]))
    hip_x: float = 0.3
    hip_y: float = 0.2
    thigh_length: float = 0.3125
    shank_length: float = 0.3125
    wheel_radius: float = 0.1
    joint_limits: np.ndarray = field(default_factory=lambda: np.array([2.9, 4.0, 4.0]))
    q_nominal_leg: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.65, -1.3]))
    gravity: float = GRAVITY

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if not np.allclose(self.inertia, self.inertia.T):
            raise ValueError("inertia must be symmetric")
        if np.any(np.linalg.eigvalsh(self.inertia) <= 0):
            raise ValueError("inertia must be positive definite")
        self._inertia_inv = np.linalg.inv(self.inertia)

    @property
    def hip_offsets(self):
        hx, hy = self.hip_x, self.hip_y
        return np.array([[hx, hy, 0.0], [hx, -hy, 0.0],
                         [-hx, hy, 0.0], [-hx, -hy, 0.0]])

    @property
    def q_nominal(self):
        return np.tile(self.q_nominal_leg, N_LEGS)

    def nominal_height(self):
        """Torso height over flat ground in the nominal configuration."""
        q = self.q_nominal_leg
        drop = (self.thigh_length * np.cos(q[1])
                + self.shank_length * np.cos(q[1] + q[2])) * np.cos(q[0])
        return drop + self.wheel_radius

    def nominal_state(self, position_xy=(0.0, 0.0), yaw=0.0, ground_height=0.0):
        x = np.zeros(STATE_DIM)
        x[2] = yaw
        x[3:5] = position_xy
        x[5] = ground_height + self.nominal_height()
        x[S_JOINTS] = self.q_nominal
        return x

    def assert_joint_limits(self, q_j):
        q = np.real(np.asarray(q_j)).reshape(N_LEGS, 3)
        if np.any(np.abs(q) > self.joint_limits[None, :]):
            raise JointLimitError("joint positions outside declared limits")

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg or {})
        kwargs = {}
        for key in ("mass", "hip_x", "hip_y", "thigh_length", "shank_length",
                    "wheel_radius", "gravity"):
            if key in cfg:
                kwargs[key] = float(cfg[key])
        if "inertia_diag" in cfg:
            kwargs["inertia"] = np.diag(np.asarray(cfg["inertia_diag"], dtype=float))
        if "joint_limits" in cfg:
            kwargs["joint_limits"] = np.asarray(cfg["joint_limits"], dtype=float)
        if "q_nominal_leg" in cfg:
            kwargs["q_nominal_leg"] = np.asarray(cfg["q_nominal_leg"], dtype=float)
        return cls(**kwargs)


def rotation_world_body(theta):
    """Rotation matrix mapping torso-frame vectors to world frame.

    ``theta`` is (..., 3) as (roll, pitch, yaw); batched and complex-safe.
    """
    theta = np.asarray(theta)
    cr, sr = np.cos(theta[..., 0]), np.sin(theta[..., 0])
    cp, sp = np.cos(theta[..., 1]), np.sin(theta[..., 1])
    cy, sy = np.cos(theta[..., 2]), np.sin(theta[..., 2])
    row0 = np.stack([cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr], axis=-1)
    row1 = np.stack([sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr], axis=-1)
    row2 = np.stack([-sp, cp * sr, cp * cr], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def euler_rate_matrix(theta, singularity_tol=0.05):
    """Map from torso-frame angular rate to Euler angle rates.

    Raises EulerSingularityError when the pitch is within ``singularity_tol``
    of +-pi/2.
    """
    theta = np.asarray(theta)
    pitch = np.real(theta[..., 1])
    if np.any(np.abs(np.abs(pitch) - np.pi / 2) < singularity_tol):
        raise EulerSingularityError("pitch too close to +-pi/2")
    cr, sr = np.cos(theta[..., 0]), np.sin(theta[..., 0])
    cp, tp = np.cos(theta[..., 1]), np.tan(theta[..., 1])
    one = np.ones_like(cr)
    zero = np.zeros_like(cr)
    row0 = np.stack([one, sr * tp, cr * tp], axis=-1)
    row1 = np.stack([zero, cr, -sr], axis=-1)
    row2 = np.stack([zero, sr / cp, cr / cp], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def euler_rate_transform(theta, omega, singularity_tol=0.05):
    """Euler angle rates for a given torso-frame angular rate."""
    T = euler_rate_matrix(theta, singularity_tol)
    return np.einsum("...ij,...j->...i", T, np.asarray(omega))


def gravity_body(theta, g=GRAVITY):
    """Gravitational acceleration expressed in the torso frame."""
    R = rotation_world_body(theta)
    g_world = np.zeros(np.shape(theta), dtype=np.result_type(theta, float))
    g_world[..., 2] = -g
    return np.einsum("...ji,...j->...i", R, g_world)


def _leg_geometry(model, q_j):
    """Axle positions, wheel axes and axle Jacobians in the torso frame.

    ``q_j`` is (..., 12). Returns (axle (..., 4, 3), axis (..., 4, 3),
    jac (..., 4, 3, 3)). Batched and complex-safe.
    """
    q = np.asarray(q_j)
    q = q.reshape(q.shape[:-1] + (N_LEGS, 3))
    q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
    l1, l2 = model.thigh_length, model.shank_length
    s1, c1 = np.sin(q1), np.cos(q1)
    s2, c2 = np.sin(q2), np.cos(q2)
    s23, c23 = np.sin(q2 + q3), np.cos(q2 + q3)

    wx = -l1 * s2 - l2 * s23
    wz = -l1 * c2 - l2 * c23
    hips = model.hip_offsets
    axle = np.stack([hips[..., :, 0] + wx, hips[..., :, 1] - s1 * wz,
                     hips[..., :, 2] + c1 * wz], axis=-1)
    axis = np.stack([np.zeros_like(c1), c1, s1], axis=-1)

    # Partials of the trig terms, then assembled into per-leg 3x3 Jacobians.
    wx2 = -l1 * c2 - l2 * c23
    wx3 = -l2 * c23
    wz2 = l1 * s2 + l2 * s23
    wz3 = l2 * s23
    zero = np.zeros_like(wx)
    col1 = np.stack([zero, -c1 * wz, -s1 * wz], axis=-1)
    col2 = np.stack([wx2, -s1 * wz2, c1 * wz2], axis=-1)
    col3 = np.stack([wx3, -s1 * wz3, c1 * wz3], axis=-1)
    jac = np.stack([col1, col2, col3], axis=-1)
    return axle, axis, jac


@dataclass
class LegKinematics:
    """Forward-kinematics output for all legs at one configuration."""

    contact_world: np.ndarray      # (4, 3) contact points in world frame
    contact_rel_com: np.ndarray    # (4, 3) contact points relative to the COM, world
    rolling_direction: np.ndarray  # (4, 3) unit vectors, world frame
    axle_body: np.ndarray          # (4, 3) wheel axle in torso frame
    wheel_axis_world: np.ndarray   # (4, 3)


def forward_kinematics(model, theta, p, q_j, terrain=None, check_limits=True):
    """Contact points and rolling directions for all four legs.

    The contact point sits at wheel-radius distance from the axle along the
    negative terrain normal; the rolling direction is the unit vector along
    wheel-axis x normal, i.e. in both the wheel plane and the ground plane.
    """
    if terrain is None:
        terrain = Terrain()
    if check_limits:
        model.assert_joint_limits(q_j)
    theta = np.asarray(theta, dtype=float)
    p = np.asarray(p, dtype=float)
    n = terrain.normal
    R = rotation_world_body(theta)
    axle_b, axis_b, _ = _leg_geometry(model, np.asarray(q_j, dtype=float))
    axle_w = p[None, :] + axle_b @ R.T
    contact = axle_w - model.wheel_radius * n[None, :]
    axis_w = axis_b @ R.T
    rolling = np.cross(axis_w, n[None, :])
    norms = np.linalg.norm(rolling, axis=-1, keepdims=True)
    if np.any(norms < 1e-9):
        raise ValueError("wheel axis parallel to terrain normal")
    rolling = rolling / norms
    return LegKinematics(contact_world=contact,
                         contact_rel_com=contact - p[None, :],
                         rolling_direction=rolling,
                         axle_body=axle_b,
                         wheel_axis_world=axis_w)


def contact_point_velocity(model, theta, omega, v, q_j, u_j):
    """World-frame velocity of every contact point. Batched and complex-safe."""
    R = rotation_world_body(theta)
    axle_b, _, jac = _leg_geometry(model, q_j)
    u = np.asarray(u_j)
    u_legs = u.reshape(u.shape[:-1] + (N_LEGS, 3))
    rel = (np.cross(np.asarray(omega)[..., None, :], axle_b)
           + np.einsum("...lij,...lj->...li", jac, u_legs))
    total = np.asarray(v)[..., None, :] + rel
    return np.einsum("...ij,...lj->...li", R, total)


def contact_jacobian(model, theta, p, q_j, leg):
    """Linear map from (omega, v, u_j) to the world velocity of one contact.

    Returned as a 3 x STATE_DIM matrix whose theta/p columns are zero, so it
    applies directly to a stacked (theta_dot-slot, p-slot, omega, v, q_dot)
    vector.
    """
    theta = np.asarray(theta, dtype=float)
    R = rotation_world_body(theta)
    axle_b, _, jac = _leg_geometry(model, np.asarray(q_j, dtype=float))
    a = axle_b[leg]
    skew_a = np.array([[0.0, -a[2], a[1]],
                       [a[2], 0.0, -a[0]],
                       [-a[1], a[0], 0.0]])
    J = np.zeros((3, STATE_DIM))
    J[:, S_OMEGA] = -R @ skew_a
    J[:, S_LINVEL] = R
    J[:, 12 + 3 * leg:12 + 3 * leg + 3] = R @ jac[leg]
    return J


def srbd_derivative(model, x, u, terrain=None, external_force=None,
                    singularity_tol=0.05):
    """State derivative of the single-rigid-body model with leg kinematics.

    Rows: Euler rates, world position rate, angular acceleration about the
    COM with the gyroscopic term and contact-force moments, linear
    acceleration from gravity plus summed contact forces, joint rates.
    Forces arrive in world frame and are rotated to the torso frame where
    omega, v and the nominal inertia live. Batched and complex-safe;
    ``external_force`` is an optional world-frame disturbance at the COM.
    """
    if terrain is None:
        terrain = Terrain()
    x = np.asarray(x)
    u = np.asarray(u)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, batch + (STATE_DIM,))
    u = np.broadcast_to(u, batch + (INPUT_DIM,))
    theta = x[..., S_THETA]
    omega = x[..., S_OMEGA]
    v = x[..., S_LINVEL]
    q_j = x[..., S_JOINTS]
    forces = u[..., U_FORCES]
    forces = forces.reshape(forces.shape[:-1] + (N_LEGS, 3))
    u_j = u[..., U_JOINTVEL]

    R = rotation_world_body(theta)
    theta_dot = euler_rate_transform(theta, omega, singularity_tol)
    p_dot = np.einsum("...ij,...j->...i", R, v)

    axle_b, _, _ = _leg_geometry(model, q_j)
    n_body = np.einsum("...ji,j->...i", R, terrain.normal)
    contact_b = axle_b - model.wheel_radius * n_body[..., None, :]
    forces_b = np.einsum("...ji,...lj->...li", R, forces)
    torque = np.cross(contact_b, forces_b).sum(axis=-2)
    i_omega = np.einsum("ij,...j->...i", model.inertia, omega)
    omega_dot = np.einsum("ij,...j->...i", model._inertia_inv,
                          -np.cross(omega, i_omega) + torque)

    total_force_b = forces_b.sum(axis=-2)
    if external_force is not None:
        total_force_b = total_force_b + np.einsum(
            "...ji,...j->...i", R, np.broadcast_to(external_force, v.shape))
    v_dot = gravity_body(theta, model.gravity) + total_force_b / model.mass

    return np.concatenate([theta_dot, p_dot, omega_dot, v_dot, u_j], axis=-1)


def _skew(v):
    """Cross-product matrices for (..., 3) input, shape (..., 3, 3)."""
    v = np.asarray(v)
    zero = np.zeros_like(v[..., 0])
    return np.stack([
        np.stack([zero, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], zero, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], zero], axis=-1),
    ], axis=-2)


def srbd_jacobians(model, x, u, terrain=None):
    """Analytic Jacobians of srbd_derivative w.r.t. state and input.

    Batched: for x, u of shape (..., 24) returns (..., 24, 24) pairs.
    The rotation derivative uses d(R)/d(theta_k) = R [g_k]x with
    g = (e_x, Rx^T e_y, R^T e_z), which keeps every block a small
    cross-product expression.
    """
    if terrain is None:
        terrain = Terrain()
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, batch + (STATE_DIM,))
    u = np.broadcast_to(u, batch + (INPUT_DIM,))
    theta = x[..., S_THETA]
    omega = x[..., S_OMEGA]
    v = x[..., S_LINVEL]
    q_j = x[..., S_JOINTS]
    forces = u[..., U_FORCES].reshape(batch + (N_LEGS, 3))

    R = rotation_world_body(theta)
    Rt = np.swapaxes(R, -1, -2)
    cr, sr = np.cos(theta[..., 0]), np.sin(theta[..., 0])
    cp, sp = np.cos(theta[..., 1]), np.sin(theta[..., 1])
    zero = np.zeros_like(cr)
    one = np.ones_like(cr)

    # Columns g_k of the rotation-derivative generators.
    g1 = np.stack([one, zero, zero], axis=-1)
    g2 = np.stack([zero, cr, -sr], axis=-1)
    g3 = np.einsum("...ji,j->...i", R, np.array([0.0, 0.0, 1.0]))
    G = np.stack([g1, g2, g3], axis=-1)                    # (..., 3, 3)

    A = np.zeros(batch + (STATE_DIM, STATE_DIM))
    B = np.zeros(batch + (STATE_DIM, INPUT_DIM))

    # Euler-rate rows.
    T = euler_rate_matrix(theta)
    tp = sp / cp
    wy, wz = omega[..., 1], omega[..., 2]
    dT_dr = np.stack([cr * tp * wy - sr * tp * wz,
                      -sr * wy - cr * wz,
                      (cr * wy - sr * wz) / cp], axis=-1)
    dT_dp = np.stack([(sr * wy + cr * wz) / cp ** 2,
                      zero,
                      (sr * wy + cr * wz) * sp / cp ** 2], axis=-1)
    A[..., 0:3, 0] = dT_dr
    A[..., 0:3, 1] = dT_dp
    A[..., S_THETA, S_OMEGA] = T

    # World position rows.
    A[..., S_POS, S_THETA] = -np.einsum("...ij,...jk,...kl->...il",
                                        R, _skew(v), G)
    A[..., S_POS, S_LINVEL] = R

    # Leg geometry shared by the force rows.
    axle_b, _, jac = _leg_geometry(model, q_j)
    n_b = np.einsum("...ji,j->...i", R, terrain.normal)
    contact_b = axle_b - model.wheel_radius * n_b[..., None, :]
    forces_b = np.einsum("...ji,...lj->...li", R, forces)
    dnb_dtheta = -np.cross(np.swapaxes(G, -1, -2), n_b[..., None, :])  # (...,3cols,3)

    # Angular acceleration rows.
    i_omega = np.einsum("ij,...j->...i", model.inertia, omega)
    A[..., S_OMEGA, S_OMEGA] = np.einsum(
        "ij,...jk->...ik", model._inertia_inv,
        -np.einsum("...ij,jk->...ik", _skew(omega), model.inertia) + _skew(i_omega))
    # d(torque)/d(theta_k): (r_w g_k x n_b) x f + c x (-g_k x f), summed over legs.
    dc = model.wheel_radius * np.cross(np.swapaxes(G, -1, -2)[..., None, :, :],
                                       n_b[..., None, None, :])  # (..., legs?, cols, 3)
    # Shapes: build per-leg, per-column cross products explicitly.
    g_cols = np.swapaxes(G, -1, -2)                        # (..., 3cols, 3)
    dc_cols = model.wheel_radius * np.cross(g_cols, n_b[..., None, :])  # (..., 3cols, 3)
    dtau = np.zeros(batch + (3, 3))
    dfsum = np.zeros(batch + (3, 3))
    for leg in range(N_LEGS):
        f_l = forces_b[..., leg, :]
        c_l = contact_b[..., leg, :]
        df = -np.cross(g_cols, f_l[..., None, :])          # (..., 3cols, 3)
        term = (np.cross(dc_cols, f_l[..., None, :])
                + np.cross(c_l[..., None, :], df))
        dtau += np.swapaxes(term, -1, -2)
        dfsum += np.swapaxes(df, -1, -2)
        # Input block: d(c x R^T lam)/d(lam) = [c]x R^T
        B[..., S_OMEGA, 3 * leg:3 * leg + 3] = np.einsum(
            "ij,...jk,...kl->...il", model._inertia_inv, _skew(c_l), Rt)
        B[..., S_LINVEL, 3 * leg:3 * leg + 3] = Rt / model.mass
        # Joint block: d(c x f)/d(q_l) = -[f]x dJ
        A[..., S_OMEGA, 12 + 3 * leg:15 + 3 * leg] = np.einsum(
            "ij,...jk,...kl->...il", model._inertia_inv,
            -_skew(f_l), jac[..., leg, :, :])
    A[..., S_OMEGA, S_THETA] += np.einsum("ij,...jk->...ik",
                                          model._inertia_inv, dtau)

    # Linear acceleration rows: vdot is a rotated world vector, so
    # d(vdot)/d(theta_k) = -g_k x vdot.
    g_world = np.array([0.0, 0.0, -model.gravity])
    v_dot = (np.einsum("...ji,j->...i", R, g_world)
             + forces_b.sum(axis=-2) / model.mass)
    A[..., S_LINVEL, S_THETA] = np.swapaxes(
        -np.cross(g_cols, v_dot[..., None, :]), -1, -2)

    B[..., S_JOINTS, U_JOINTVEL] = np.eye(N_JOINTS)
    return A, B


def srbd_linearization(model, x, u, terrain=None):
    """Jacobians of srbd_derivative for a single sample (24, 24) each."""
    A, B = srbd_jacobians(model, np.asarray(x, dtype=float),
                          np.asarray(u, dtype=float), terrain)
    return A, B


def srbd_linearization_cs(model, x, u, terrain=None):
    """Complex-step Jacobians; independent cross-check of srbd_jacobians."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    def f_of_x(xb):
        return srbd_derivative(model, xb, u[None, :], terrain)

    def f_of_u(ub):
        return srbd_derivative(model, x[None, :], ub, terrain)

    A = complex_step_jacobian(f_of_x, x)
    B = complex_step_jacobian(f_of_u, u)
    return A, B
