"""Deterministic closed-loop harness and evaluation metrics.

Integrates the kinodynamic plant under the receding-horizon policy,
injects torso disturbances, and computes the evaluation metrics: terminal
prediction error over constant-velocity windows, the planned-force ZMP and
its motion-implied counterpart against the support polygon, mechanical
cost of transport, and contact-timing logs.

The plant uses the same dynamics as the solver (perfect state feedback);
model-mismatch studies inject external forces instead of swapping plants.
"""

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import gait as _gait
from . import model as _model
from . import ocp as _ocp
from . import solver as _solver
from .fastpath import DynamicsRuntime
from .model import LEG_NAMES, N_LEGS, S_JOINTS, S_POS, S_THETA
from .numerics import make_time_grid


class UndefinedZmpError(ValueError):
    """No stance leg carries enough normal force to define a ZMP."""


@dataclass
class PiecewiseProfile:
    """Piecewise-linear profile over time, clamped at the ends."""

    times: np.ndarray
    values: np.ndarray   # (n,) or (n, k)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)

    def __call__(self, t):
        if self.values.ndim == 1:
            return float(np.interp(t, self.times, self.values))
        return np.array([np.interp(t, self.times, self.values[:, i])
                         for i in range(self.values.shape[1])])

    def constant_on(self, t0, t1, tol=1e-12):
        """True when the profile is constant over [t0, t1] (exact check on
        the breakpoints, not on samples)."""
        v0 = np.atleast_1d(self(t0))
        v1 = np.atleast_1d(self(t1))
        if np.any(np.abs(v0 - v1) > tol):
            return False
        inside = (self.times > t0) & (self.times < t1)
        for tk in self.times[inside]:
            if np.any(np.abs(np.atleast_1d(self(tk)) - v0) > tol):
                return False
        return True

    @classmethod
    def constant(cls, value, duration):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        v = value if value.size > 1 else value[0]
        return cls(np.array([0.0, duration]),
                   np.stack([np.atleast_1d(v)] * 2).squeeze()
                   if value.size > 1 else np.array([v, v]))


@dataclass
class Disturbance:
    """Constant world-frame force on the torso over a time window."""

    force: np.ndarray
    t_start: float
    t_end: float

    def force_at(self, t):
        if self.t_start <= t < self.t_end:
            return np.asarray(self.force, dtype=float)
        return np.zeros(3)


@dataclass
class Scenario:
    """Closed-loop experiment description."""

    name: str
    duration: float
    velocity: PiecewiseProfile          # body-frame (vx, vy, vz)
    yaw_rate: PiecewiseProfile          # scalar
    disturbances: list = field(default_factory=list)
    mpc_period: float = 0.03
    plant_step: float = 0.0025
    horizon: float = 0.8
    execution_mode: str = "affine"      # "affine" | "feedforward"
    mu: float = 0.7
    seed: int = 0
    segments: dict = field(default_factory=dict)   # name -> (t0, t1)

    def __post_init__(self):
        if self.duration <= self.horizon:
            raise ValueError("duration must exceed the horizon")
        if self.mpc_period < self.plant_step:
            raise ValueError("MPC period must be at least the plant step")
        if self.execution_mode not in ("affine", "feedforward"):
            raise ValueError("execution_mode must be affine or feedforward")

    def disturbance_at(self, t):
        f = np.zeros(3)
        for d in self.disturbances:
            f = f + d.force_at(t)
        return f


@dataclass
class CycleRecord:
    """Per-MPC-cycle summary stored for the prediction-error study."""

    index: int = 0
    t: float = 0.0
    plant_index: int = 0
    pred_position: np.ndarray = None
    pred_plant_index: int = 0
    cost: float = 0.0
    eq_residual: float = 0.0
    min_cone_margin: float = 0.0
    iterations: int = 0
    converged: bool = True
    degraded: bool = False
    solve_time: float = 0.0
    iteration_rows: list = field(default_factory=list)


@dataclass
class SimLog:
    """Uniformly sampled plant log plus per-cycle solver summaries."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    contacts: np.ndarray
    disturbances: np.ndarray
    cycles: list
    scenario: Scenario
    model: _model.RobotModel
    terrain: _model.Terrain
    horizon: float
    fall: bool = False
    fall_time: float = math.nan

    def segment_indices(self, t0, t1):
        return np.where((self.times >= t0) & (self.times <= t1))[0]

    def max_simultaneous_swings(self, t0=None, t1=None):
        idx = (self.segment_indices(t0, t1) if t0 is not None
               else np.arange(len(self.times)))
        if len(idx) == 0:
            return 0
        return int((~self.contacts[idx]).sum(axis=1).max())


class _ClosedLoopController:
    """Shared between the synchronous and asynchronous execution paths."""

    def __init__(self, scenario, model, terrain, gait_cfg, cost_weights,
                 swing, settings):
        self.scenario = scenario
        self.model = model
        self.terrain = terrain
        self.gait_cfg = gait_cfg
        self.swing = swing
        self.settings = settings
        self.runtime = DynamicsRuntime(model, terrain)
        self.runtime.warm_up()
        self.z_nominal = model.nominal_height()
        self.ref = _gait.ReferenceTrajectory.from_velocity_profile(
            scenario.velocity, lambda t: scenario.yaw_rate(t),
            0.0, scenario.duration + scenario.horizon + scenario.mpc_period,
            gait_cfg.dt_grid,
            start_position=(0.0, 0.0, self.z_nominal), start_yaw=0.0)
        self.cost = _ocp.CostConfig.from_weights(
            self._x_ref, self._u_ref, **(cost_weights or {}))
        self.touchdown_offsets = None
        self.prev_schedule = None

    def _x_ref(self, t):
        x = np.zeros(_model.STATE_DIM)
        x[2] = self.ref.yaw_at(t)
        p = self.ref.position_at(t)
        x[3], x[4], x[5] = p[0], p[1], self.z_nominal
        x[8] = self.ref.yaw_rate_at(t)
        v = self.ref.velocity_at(t)
        x[9], x[10], x[11] = v[0], v[1], 0.0
        x[S_JOINTS] = self.model.q_nominal
        return x

    def _u_ref(self, t):
        u = np.zeros(_model.INPUT_DIM)
        share = self.model.mass * self.model.gravity / N_LEGS
        for leg in range(N_LEGS):
            u[3 * leg + 2] = share
        return u

    def assemble(self, x, t):
        legs = _gait.measured_leg_states(
            self.model, self.terrain, x, t, self.touchdown_offsets)
        schedule = _gait.generate_gait(self.gait_cfg, legs,
                                       self.prev_schedule, self.ref,
                                       self.scenario.horizon, t_now=t)
        self.prev_schedule = schedule
        times = t + make_time_grid(self.scenario.horizon,
                                   self.gait_cfg.dt_grid)
        return _ocp.assemble_ocp(self.model, self.terrain, schedule,
                                 self.cost, self.swing, x, self.runtime,
                                 times=times,
                                 swing_duration=self.gait_cfg.t_swing)

    def init_anchors(self, x):
        """Fix the touch-down offsets from the starting stance.

        They persist between cycles and are refreshed only by real
        touch-down events; re-deriving them from the drifting geometry
        every cycle would erase the accumulated drift the utilities
        measure.
        """
        fk = _model.forward_kinematics(self.model, x[S_THETA], x[S_POS],
                                       x[S_JOINTS], self.terrain,
                                       check_limits=False)
        rz = _gait._rot_z(-x[2])
        self.touchdown_offsets = [
            rz @ np.array([*(fk.contact_world[i] - x[S_POS])[:2], 0.0])
            for i in range(N_LEGS)]

    def note_touchdowns(self, x, prev_flags, flags):
        """Record torso-to-contact offsets at real touch-down events."""
        landed = flags & ~prev_flags
        if not landed.any():
            return
        fk = _model.forward_kinematics(self.model, x[S_THETA], x[S_POS],
                                       x[S_JOINTS], self.terrain,
                                       check_limits=False)
        rz = _gait._rot_z(-x[2])
        for leg in range(N_LEGS):
            if landed[leg]:
                off = fk.contact_world[leg] - x[S_POS]
                off[2] = 0.0
                self.touchdown_offsets[leg] = rz @ off

    def fall_detected(self, x):
        return (x[5] < 0.25 or abs(x[0]) > 0.7 or abs(x[1]) > 0.7)


def run_scenario(scenario, model=None, terrain=None, gait_cfg=None,
                 cost_weights=None, swing=None, settings=None):
    """Run the closed loop and return the SimLog.

    Every MPC period: regenerate the gait, assemble the problem and take a
    warm-started solver step; between updates the plant integrates at the
    plant step under the node-held, constraint-projected policy input plus
    any scheduled disturbance. Deterministic in synchronous mode.
    """
    model = model or _model.RobotModel()
    terrain = terrain or _model.Terrain(mu=scenario.mu)
    gait_cfg = gait_cfg or _gait.GaitConfig()
    swing = swing or _ocp.SwingProfile()
    settings = settings or _solver.SolverSettings()

    ctl = _ClosedLoopController(scenario, model, terrain, gait_cfg,
                                cost_weights, swing, settings)
    plant_dt = scenario.plant_step
    n_steps = int(round(scenario.duration / plant_dt))
    steps_per_cycle = int(round(scenario.mpc_period / plant_dt))
    pred_offset = int(round(scenario.horizon / plant_dt))
    affine = scenario.execution_mode == "affine"

    x = model.nominal_state()
    ctl.init_anchors(x)
    times = plant_dt * np.arange(n_steps + 1)
    states = np.zeros((n_steps + 1, _model.STATE_DIM))
    inputs = np.zeros((n_steps, _model.INPUT_DIM))
    contacts = np.ones((n_steps + 1, N_LEGS), dtype=bool)
    dists = np.zeros((n_steps + 1, 3))
    states[0] = x
    cycles = []
    fall = False
    fall_time = math.nan

    result = None
    prob = None
    prev_flags = np.ones(N_LEGS, dtype=bool)
    last_step = n_steps
    for i in range(n_steps):
        t = i * plant_dt
        if prob is not None:
            f_now = prob.schedule.flags_at(
                min(t, prob.schedule.t_end - 1e-9))
            ctl.note_touchdowns(x, prev_flags, f_now)
            prev_flags = f_now
        if i % steps_per_cycle == 0:
            result, prob = _solver.mpc_step(
                ctl.assemble, x, t, previous=result, settings=settings)
            rows = [(len(cycles), *row) for row in result.diagnostics_rows()]
            stats = result.iterations[-1] if result.iterations else None
            cycles.append(CycleRecord(
                index=len(cycles), t=t, plant_index=i,
                pred_position=result.x_nom[-1][3:6].copy(),
                pred_plant_index=i + pred_offset,
                cost=result.cost,
                eq_residual=stats.eq_residual_norm if stats else math.nan,
                min_cone_margin=stats.min_cone_margin if stats else math.nan,
                iterations=len(result.iterations) - 1,
                converged=result.converged,
                degraded=result.degraded,
                solve_time=result.solve_time,
                iteration_rows=rows))
        k = prob.times.searchsorted(t + 1e-12, side="right") - 1
        k = min(max(int(k), 0), len(prob.times) - 2)
        if result.degraded:
            # Stale feedback is dangerous; hold gravity compensation until
            # a fresh solve lands.
            u = prob.u_ref_nodes[k].copy()
        else:
            k_pol = result.policy.interval_of(t)
            if affine:
                u = result.policy.node_input(k_pol, x)
            else:
                u = result.policy.u_nom[k_pol].copy()
        u = prob.project_input(k, x, u)
        flags = prob.schedule.flags_at(min(t, prob.schedule.t_end - 1e-9))
        ctl.note_touchdowns(x, prev_flags, flags)
        prev_flags = flags.copy()
        contacts[i] = flags
        f_ext = scenario.disturbance_at(t)
        dists[i] = f_ext
        inputs[i] = u
        x = ctl.runtime.rk4_step(x, u, plant_dt,
                                 f_ext if f_ext.any() else None)
        states[i + 1] = x
        contacts[i + 1] = flags
        dists[i + 1] = f_ext
        if ctl.fall_detected(x):
            fall = True
            fall_time = (i + 1) * plant_dt
            last_step = i + 1
            break

    end = last_step + 1
    return SimLog(times=times[:end], states=states[:end], inputs=inputs[:end - 1],
                  contacts=contacts[:end], disturbances=dists[:end],
                  cycles=cycles, scenario=scenario, model=model,
                  terrain=terrain, horizon=scenario.horizon,
                  fall=fall, fall_time=fall_time)


def prediction_error(log, horizon=None):
    """Terminal-position prediction error per valid sample.

    Pairs each cycle's predicted terminal COM position with the measured
    position ``horizon`` seconds later, keeping only samples whose whole
    trailing window had constant commanded velocities. Returns
    (times, errors); both empty when no constant-velocity window exists.
    """
    horizon = log.horizon if horizon is None else horizon
    sc = log.scenario
    ts, errs = [], []
    for rec in log.cycles:
        j = rec.pred_plant_index
        if rec.degraded or rec.pred_position is None:
            continue
        if j >= len(log.times):
            continue
        t0, t1 = rec.t, log.times[j]
        if not (sc.velocity.constant_on(t0, t1)
                and sc.yaw_rate.constant_on(t0, t1)):
            continue
        errs.append(float(np.linalg.norm(
            rec.pred_position - log.states[j, 3:6])))
        ts.append(t1)
    return np.asarray(ts), np.asarray(errs)


def _contact_points(log, i):
    x = log.states[i]
    fk = _model.forward_kinematics(log.model, x[S_THETA], x[S_POS],
                                   x[S_JOINTS], log.terrain,
                                   check_limits=False)
    return fk.contact_world


def zmp(log, i, force_threshold=1.0):
    """Normal-force-weighted centroid of the stance contact points.

    Uses the planned (applied) contact forces; tangential-moment terms are
    omitted on the flat-terrain plane. Raises UndefinedZmpError when no
    stance leg carries normal force above the threshold.
    """
    if i >= len(log.inputs):
        raise IndexError("sample beyond the logged inputs")
    flags = log.contacts[i]
    forces = log.inputs[i][:12].reshape(N_LEGS, 3)
    n = log.terrain.normal
    fz = forces @ n
    active = flags & (fz > force_threshold)
    if not active.any():
        raise UndefinedZmpError(f"no loaded stance leg at sample {i}")
    pts = _contact_points(log, i)
    w = np.where(flags, fz, 0.0)
    return (w[:, None] * pts[:, :2]).sum(axis=0) / w.sum()


def zmp_from_motion(log, i):
    """ZMP implied by the COM dynamics (the quantity balance models check).

    Computed from the total applied force: the ground point where the
    gravito-inertial wrench pierces the terrain plane, ignoring angular
    momentum rate. Diverges from the support polygon exactly when the
    executed motion leaves the quasi-static envelope.
    """
    if i >= len(log.inputs):
        raise IndexError("sample beyond the logged inputs")
    x = log.states[i]
    total = log.inputs[i][:12].reshape(N_LEGS, 3).sum(axis=0) \
        + log.disturbances[i]
    m = log.model.mass
    denom = total[2] / m          # zdd + g
    if denom < 1e-3:
        raise UndefinedZmpError("vanishing normal support")
    a_xy = total[:2] / m
    height = x[5] - log.terrain.offset
    return x[3:5] - height * a_xy / denom


def support_margin(zmp_point, contact_points_xy):
    """Signed distance from a ground point to the support polygon.

    Positive inside. One contact degenerates to minus the point distance,
    two to minus the segment distance.
    """
    p = np.asarray(zmp_point, dtype=float)
    pts = np.asarray(contact_points_xy, dtype=float).reshape(-1, 2)
    if len(pts) == 1:
        return -float(np.linalg.norm(p - pts[0]))
    if len(pts) == 2:
        return -_point_segment_distance(p, pts[0], pts[1])
    hull = _convex_hull(pts)
    if len(hull) == 2:
        return -_point_segment_distance(p, hull[0], hull[1])
    inside = _point_in_polygon(p, hull)
    d = min(_point_segment_distance(p, hull[j], hull[(j + 1) % len(hull)])
            for j in range(len(hull)))
    return d if inside else -d


def _point_segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return float(np.linalg.norm(p - a))
    s = np.clip(float((p - a) @ ab) / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - (a + s * ab)))


def _convex_hull(pts):
    """Monotone-chain hull, counterclockwise, no duplicate endpoint."""
    pts = sorted(map(tuple, pts))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=float)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return np.asarray(hull, dtype=float)


def _point_in_polygon(p, poly):
    inside = False
    n = len(poly)
    for j in range(n):
        a, b = poly[j], poly[(j + 1) % n]
        if (a[1] > p[1]) != (b[1] > p[1]):
            xint = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if p[0] < xint:
                inside = not inside
    return inside


def support_margin_series(log, use_motion_zmp=False, force_threshold=1.0):
    """Per-sample support margin; NaN where the ZMP is undefined."""
    n = len(log.inputs)
    out = np.full(n, np.nan)
    zx = np.full(n, np.nan)
    zy = np.full(n, np.nan)
    for i in range(n):
        try:
            point = (zmp_from_motion(log, i) if use_motion_zmp
                     else zmp(log, i, force_threshold))
        except UndefinedZmpError:
            continue
        pts = _contact_points(log, i)[log.contacts[i]][:, :2]
        if len(pts) == 0:
            continue
        out[i] = support_margin(point, pts)
        zx[i], zy[i] = point
    return out, zx, zy


def mechanical_cot(log, t0=None, t1=None, min_speed=0.05):
    """Mechanical cost of transport over a log window.

    Joint torques follow from the applied contact forces through the leg
    Jacobians (wheels are locked joints and excluded); positive joint power
    is averaged and normalized by weight times mean speed. Undefined below
    the speed floor.
    """
    idx = (log.segment_indices(t0, t1) if t0 is not None
           else np.arange(len(log.times)))
    idx = idx[idx < len(log.inputs)]
    if len(idx) == 0:
        raise ValueError("empty window")
    power = np.zeros(len(idx))
    speed = np.zeros(len(idx))
    for j, i in enumerate(idx):
        x = log.states[i]
        u = log.inputs[i]
        R = _model.rotation_world_body(x[S_THETA])
        _, _, jac = _model._leg_geometry(log.model, x[S_JOINTS])
        qd = u[12:24].reshape(N_LEGS, 3)
        forces = u[:12].reshape(N_LEGS, 3)
        for leg in range(N_LEGS):
            if not log.contacts[i, leg]:
                continue
            tau = (R @ jac[leg]).T @ forces[leg]
            power[j] += np.maximum(tau * qd[leg], 0.0).sum()
        v_world = R @ x[9:12]
        speed[j] = np.hypot(v_world[0], v_world[1])
    mean_speed = float(speed.mean())
    if mean_speed <= min_speed:
        raise ValueError(f"mean speed {mean_speed:.3f} below floor")
    weight = log.model.mass * log.model.gravity
    return float(power.mean() / (weight * mean_speed))


def rolling_cot(log, window=1.0):
    """Mechanical COT over a centered sliding window; NaN below the speed
    floor or near the log edges."""
    n = len(log.inputs)
    out = np.full(n, np.nan)
    half = window / 2.0
    step = max(1, int(round(0.05 / log.scenario.plant_step)))
    for i in range(0, n, step):
        t = log.times[i]
        if t - half < 0 or t + half > log.times[n - 1]:
            continue
        try:
            out[i] = mechanical_cot(log, t - half, t + half)
        except ValueError:
            continue
    return out


def stance_slip_speeds(log):
    """Lateral/normal contact-point speed of stance legs per sample."""
    n = len(log.inputs)
    out = np.zeros(n)
    for i in range(n):
        x = log.states[i]
        u = log.inputs[i]
        worst = 0.0
        for leg in range(N_LEGS):
            if not log.contacts[i, leg]:
                continue
            r = _ocp.stance_constraints(log.model, log.terrain, x, u, leg)
            worst = max(worst, float(np.abs(r).max()))
        out[i] = worst
    return out


def swing_force_magnitudes(log):
    """Largest applied force magnitude on swing legs per sample."""
    n = len(log.inputs)
    out = np.zeros(n)
    for i in range(n):
        forces = log.inputs[i][:12].reshape(N_LEGS, 3)
        swing = ~log.contacts[i]
        if swing.any():
            out[i] = float(np.abs(forces[swing]).max())
    return out


def cone_margin_series(log, eps=0.01):
    """Smallest friction-cone margin over stance legs per sample."""
    n = len(log.inputs)
    out = np.full(n, np.nan)
    for i in range(n):
        margins = []
        forces = log.inputs[i][:12].reshape(N_LEGS, 3)
        for leg in range(N_LEGS):
            if log.contacts[i, leg]:
                margins.append(_ocp.friction_cone(forces[leg], log.terrain,
                                                  eps)[0])
        if margins:
            out[i] = min(margins)
    return out


def _profile(points):
    """Helper: build a piecewise profile from (time, value) pairs."""
    ts = np.array([p[0] for p in points], dtype=float)
    vs = np.array([p[1] for p in points], dtype=float)
    return PiecewiseProfile(ts, vs)


def _velocity_profile(points):
    ts = np.array([p[0] for p in points], dtype=float)
    vs = np.array([p[1] for p in points], dtype=float)
    return PiecewiseProfile(ts, vs.reshape(len(ts), -1))


def builtin_scenario(name, seed=0):
    """Shipped scenario library; one scenario per acceptance study."""
    if name == "stand":
        return Scenario(
            name=name, duration=5.0, seed=seed,
            velocity=_velocity_profile([(0.0, (0, 0, 0)), (5.0, (0, 0, 0))]),
            yaw_rate=_profile([(0.0, 0.0), (5.0, 0.0)]))
    if name == "drive_1ms":
        # Perfect-model prediction study: feedforward execution.
        return Scenario(
            name=name, duration=6.0, seed=seed,
            execution_mode="feedforward",
            velocity=_velocity_profile([
                (0.0, (0, 0, 0)), (1.0, (1.0, 0, 0)), (6.0, (1.0, 0, 0))]),
            yaw_rate=_profile([(0.0, 0.0), (6.0, 0.0)]),
            segments={"cruise": (1.8, 6.0)})
    if name == "disturbed_drive":
        return Scenario(
            name=name, duration=6.0, seed=seed,
            velocity=_velocity_profile([
                (0.0, (0, 0, 0)), (1.0, (1.0, 0, 0)), (6.0, (1.0, 0, 0))]),
            yaw_rate=_profile([(0.0, 0.0), (6.0, 0.0)]),
            disturbances=[Disturbance(np.array([0.0, 50.0, 0.0]), 2.5, 3.0)],
            segments={"cruise": (1.8, 6.0)})
    if name == "lateral_drift":
        return Scenario(
            name=name, duration=4.0, seed=seed,
            velocity=_velocity_profile([
                (0.0, (0, 0, 0)), (0.5, (0, 0.2, 0)), (4.0, (0, 0.2, 0))]),
            yaw_rate=_profile([(0.0, 0.0), (4.0, 0.0)]))
    if name == "reversal":
        # Fast +2 -> -2 m/s direction change with a yaw-rate overlay timed
        # over the flip so the dynamic gait is active through the reversal.
        return Scenario(
            name=name, duration=5.0, seed=seed,
            velocity=_velocity_profile([
                (0.0, (0, 0, 0)), (0.8, (2.0, 0, 0)), (2.0, (2.0, 0, 0)),
                (3.0, (-2.0, 0, 0)), (4.4, (-2.0, 0, 0)), (5.0, (0, 0, 0))]),
            yaw_rate=_profile([
                (0.0, 0.0), (2.0, 0.0), (2.2, 0.9), (3.2, 0.9),
                (3.4, 0.0), (5.0, 0.0)]),
            segments={"reversal": (2.0, 3.5)})
    if name == "mixed_velocity":
        # Matched forward speed across three yaw regimes: pure driving,
        # static one-leg-at-a-time stepping, diagonal-pair trotting.
        return Scenario(
            name=name, duration=14.0, seed=seed,
            velocity=_velocity_profile([
                (0.0, (0, 0, 0)), (0.5, (1.0, 0, 0)), (13.6, (1.0, 0, 0)),
                (14.0, (0, 0, 0))]),
            yaw_rate=_profile([
                (0.0, 0.0), (4.0, 0.0), (4.3, 0.15), (9.2, 0.15),
                (9.5, 0.9), (13.4, 0.9), (13.7, 0.0), (14.0, 0.0)]),
            segments={"drive": (1.0, 3.9), "static": (6.0, 9.1),
                      "trot": (10.8, 13.3)})
    raise KeyError(f"unknown scenario '{name}'")


BUILTIN_SCENARIOS = ("stand", "drive_1ms", "disturbed_drive",
                     "lateral_drift", "reversal", "mixed_velocity")


def scenario_from_config(cfg):
    """Scenario from a parsed config mapping (shared config format)."""
    cfg = dict(cfg)
    name = cfg.pop("name", "custom")
    base = cfg.pop("base", None)
    if base is not None:
        sc = builtin_scenario(base, seed=int(cfg.pop("seed", 0)))
        for key, val in cfg.items():
            if hasattr(sc, key):
                setattr(sc, key, val)
        sc.name = name
        return sc
    velocity = _velocity_profile([(p["t"], tuple(p["v"]))
                                  for p in cfg.pop("velocity")])
    yaw_rate = _profile([(p["t"], p["w"]) for p in cfg.pop("yaw_rate")])
    disturbances = [Disturbance(np.asarray(d["force"], dtype=float),
                                float(d["t_start"]), float(d["t_end"]))
                    for d in cfg.pop("disturbances", [])]
    segments = {k: tuple(v) for k, v in cfg.pop("segments", {}).items()}
    return Scenario(name=name, velocity=velocity, yaw_rate=yaw_rate,
                    disturbances=disturbances, segments=segments,
                    **{k: v for k, v in cfg.items()
                       if k in ("duration", "mpc_period", "plant_step",
                                "horizon", "execution_mode", "mu", "seed")})


# ---------------------------------------------------------------------------
# Exports

_FMT = "%.17g"


def _write_csv(path, header, columns):
    rows = np.column_stack(columns)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_FMT % v for v in row) + "\n")


STATE_COLUMNS = (["roll", "pitch", "yaw", "px", "py", "pz",
                  "wx", "wy", "wz", "vx", "vy", "vz"]
                 + [f"q_{leg}_{j}" for leg in LEG_NAMES
                    for j in ("haa", "hfe", "kfe")])
INPUT_COLUMNS = ([f"f_{leg}_{ax}" for leg in LEG_NAMES for ax in "xyz"]
                 + [f"qd_{leg}_{j}" for leg in LEG_NAMES
                    for j in ("haa", "hfe", "kfe")])


def export_logs(log, out_dir):
    """Write states/inputs/contacts/metrics CSVs plus summary.json.

    CSV contents are deterministic for a given run; the summary carries the
    aggregate metrics (wall-clock timings live only there).
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    n_u = len(log.inputs)
    _write_csv(os.path.join(out_dir, "states.csv"),
               ["time"] + STATE_COLUMNS,
               [log.times] + [log.states[:, j] for j in range(24)])
    _write_csv(os.path.join(out_dir, "inputs.csv"),
               ["time"] + INPUT_COLUMNS,
               [log.times[:n_u]] + [log.inputs[:, j] for j in range(24)])
    _write_csv(os.path.join(out_dir, "contacts.csv"),
               ["time"] + list(LEG_NAMES),
               [log.times] + [log.contacts[:, j].astype(float)
                              for j in range(N_LEGS)])

    pred_t, pred_e = prediction_error(log)
    pred_col = np.full(n_u, np.nan)
    if len(pred_t):
        idx = np.round(pred_t / log.scenario.plant_step).astype(int)
        idx = np.clip(idx, 0, n_u - 1)
        pred_col[idx] = pred_e
    margin_force, zfx, zfy = support_margin_series(log)
    margin_motion, zmx, zmy = support_margin_series(log, use_motion_zmp=True)
    cone = cone_margin_series(log)
    slip = stance_slip_speeds(log)
    swing_f = swing_force_magnitudes(log)
    cot_col = rolling_cot(log)
    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ["time", "prediction_error", "zmp_x", "zmp_y",
                "margin_force_zmp", "zmp_motion_x", "zmp_motion_y",
                "margin_motion_zmp", "cone_margin_min", "stance_slip_speed",
                "swing_force_max", "cot_window"],
               [log.times[:n_u], pred_col, zfx, zfy, margin_force,
                zmx, zmy, margin_motion, cone, slip, swing_f, cot_col])

    rows = []
    for rec in log.cycles:
        for r in rec.iteration_rows:
            rows.append((rec.index, rec.t) + tuple(r[1:]))
    with open(os.path.join(out_dir, "solver_diagnostics.csv"), "w") as fh:
        fh.write("cycle,time,iteration,cost,eq_residual_norm,"
                 "min_cone_margin,step_size\n")
        for row in rows:
            fh.write(",".join(_FMT % v for v in row) + "\n")

    summary = summarize(log)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def summarize(log):
    """Aggregate metrics: prediction-error stats, constraint extremes,
    margins and per-segment cost of transport."""
    pred_t, pred_e = prediction_error(log)
    margin_motion, _, _ = support_margin_series(log, use_motion_zmp=True)
    margin_force, _, _ = support_margin_series(log)
    cone = cone_margin_series(log)
    slip = stance_slip_speeds(log)
    swing_f = swing_force_magnitudes(log)
    cot_segments = {}
    for name, (t0, t1) in log.scenario.segments.items():
        try:
            cot_segments[name] = mechanical_cot(log, t0, t1)
        except ValueError:
            cot_segments[name] = None
    solve_times = [rec.solve_time for rec in log.cycles if not rec.degraded]
    summary = {
        "scenario": log.scenario.name,
        "seed": log.scenario.seed,
        "duration": float(log.times[-1]),
        "fall": bool(log.fall),
        "fall_time": None if math.isnan(log.fall_time) else log.fall_time,
        "prediction_error_mean": float(pred_e.mean()) if len(pred_e) else None,
        "prediction_error_std": float(pred_e.std()) if len(pred_e) else None,
        "prediction_samples": int(len(pred_e)),
        "min_cone_margin": float(np.nanmin(cone)) if np.isfinite(cone).any() else None,
        "max_stance_slip_speed": float(slip.max()) if len(slip) else None,
        "max_swing_force": float(swing_f.max()) if len(swing_f) else None,
        "min_margin_force_zmp": float(np.nanmin(margin_force))
            if np.isfinite(margin_force).any() else None,
        "min_margin_motion_zmp": float(np.nanmin(margin_motion))
            if np.isfinite(margin_motion).any() else None,
        "cot_per_segment": cot_segments,
        "max_simultaneous_swings": log.max_simultaneous_swings(),
        "mpc_cycles": len(log.cycles),
        "mean_solve_time": float(np.mean(solve_times)) if solve_times else None,
        "max_solve_time": float(np.max(solve_times)) if solve_times else None,
    }
    return summary


def run_scenario_async(scenario, model=None, terrain=None, gait_cfg=None,
                       cost_weights=None, swing=None, settings=None):
    """Asynchronous variant: the solver runs in a worker thread.

    The plant keeps integrating under the latest policy; finished solves
    hand over at the next plant step with their solve timestamp. Wall-clock
    dependent, hence nondeterministic; the synchronous path is the one
    under test everywhere determinism matters.
    """
    model = model or _model.RobotModel()
    terrain = terrain or _model.Terrain(mu=scenario.mu)
    gait_cfg = gait_cfg or _gait.GaitConfig()
    swing = swing or _ocp.SwingProfile()
    settings = settings or _solver.SolverSettings()
    ctl = _ClosedLoopController(scenario, model, terrain, gait_cfg,
                                cost_weights, swing, settings)
    plant_dt = scenario.plant_step
    n_steps = int(round(scenario.duration / plant_dt))
    steps_per_cycle = int(round(scenario.mpc_period / plant_dt))
    pred_offset = int(round(scenario.horizon / plant_dt))
    affine = scenario.execution_mode == "affine"

    requests = queue.Queue(maxsize=1)
    results = queue.Queue()

    def worker():
        prev = None
        while True:
            item = requests.get()
            if item is None:
                return
            x_snap, t_snap = item
            try:
                res, prob = _solver.mpc_step(ctl.assemble, x_snap, t_snap,
                                             previous=prev,
                                             settings=settings)
                prev = res
                results.put((res, prob, t_snap))
            except Exception:
                results.put(None)
                return

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()

    x = model.nominal_state()
    ctl.init_anchors(x)
    times = plant_dt * np.arange(n_steps + 1)
    states = np.zeros((n_steps + 1, _model.STATE_DIM))
    inputs = np.zeros((n_steps, _model.INPUT_DIM))
    contacts = np.ones((n_steps + 1, N_LEGS), dtype=bool)
    dists = np.zeros((n_steps + 1, 3))
    states[0] = x
    cycles = []
    fall = False
    fall_time = math.nan
    last_step = n_steps

    requests.put((x.copy(), 0.0))
    got = results.get()
    if got is None:
        raise RuntimeError("solver worker failed on the first cycle")
    result, prob, t_solved = got
    cycles.append(CycleRecord(
        index=0, t=0.0, plant_index=0,
        pred_position=result.x_nom[-1][3:6].copy(),
        pred_plant_index=pred_offset, cost=result.cost,
        iterations=len(result.iterations) - 1,
        converged=result.converged, solve_time=result.solve_time))

    pending = False
    for i in range(n_steps):
        t = i * plant_dt
        if not pending and i % steps_per_cycle == 0 and i > 0:
            try:
                requests.put_nowait((x.copy(), t))
                pending = True
            except queue.Full:
                pass
        if pending:
            try:
                got = results.get_nowait()
                if got is None:
                    break
                result, prob, t_solved = got
                pending = False
                cycles.append(CycleRecord(
                    index=len(cycles), t=t_solved,
                    plant_index=int(round(t_solved / plant_dt)),
                    pred_position=result.x_nom[-1][3:6].copy(),
                    pred_plant_index=int(round(t_solved / plant_dt))
                    + pred_offset,
                    cost=result.cost,
                    iterations=len(result.iterations) - 1,
                    converged=result.converged,
                    solve_time=result.solve_time))
            except queue.Empty:
                pass
        k = prob.times.searchsorted(t + 1e-12, side="right") - 1
        k = min(max(int(k), 0), len(prob.times) - 2)
        if result.degraded:
            u = prob.u_ref_nodes[k].copy()
        else:
            k_pol = result.policy.interval_of(t)
            u = (result.policy.node_input(k_pol, x) if affine
                 else result.policy.u_nom[k_pol].copy())
        u = prob.project_input(k, x, u)
        flags = prob.schedule.flags_at(
            min(max(t, prob.schedule.t_start), prob.schedule.t_end - 1e-9))
        contacts[i] = flags
        f_ext = scenario.disturbance_at(t)
        dists[i] = f_ext
        inputs[i] = u
        x = ctl.runtime.rk4_step(x, u, plant_dt,
                                 f_ext if f_ext.any() else None)
        states[i + 1] = x
        contacts[i + 1] = flags
        dists[i + 1] = f_ext
        if ctl.fall_detected(x):
            fall = True
            fall_time = (i + 1) * plant_dt
            last_step = i + 1
            break

    try:
        requests.put_nowait(None)
    except queue.Full:
        # Worker busy with a final solve; drain and signal again.
        results.get()
        requests.put(None)
    thread.join(timeout=30.0)

    end = last_step + 1
    return SimLog(times=times[:end], states=states[:end],
                  inputs=inputs[:end - 1], contacts=contacts[:end],
                  disturbances=dists[:end], cycles=cycles,
                  scenario=scenario, model=model, terrain=terrain,
                  horizon=scenario.horizon, fall=fall, fall_time=fall_time)
